#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lavi/error.hpp"
#include "lavi/eval.hpp"
#include "lavi/rng.hpp"

namespace lavi {
namespace {

TEST(Classify, InverseOfRenderOnRandomSpecs) {
  Rng rng(101);
  for (int i = 0; i < 2000; ++i) {
    const SceneSpec spec = generate_scene(rng).first;
    const Classification c = classify_image(render(spec, 32));
    ASSERT_FALSE(c.rejected) << describe(spec) << ": " << c.reason;
    ASSERT_EQ(c.spec, spec) << describe(spec) << " vs " << describe(c.spec);
  }
}

TEST(Classify, GrayImageIsRejected) {
  const Classification c = classify_image(Tensor({3, 32, 32}));
  EXPECT_TRUE(c.rejected);
  EXPECT_EQ(c.reason, "no objects");
}

TEST(Classify, ThreeObjectsAreRejected) {
  Tensor img = render(SceneSpec{{{ShapeKind::circle, Color::red, 0, 0, SizeClass::small},
                                 {ShapeKind::square, Color::blue, 0, 2, SizeClass::small}},
                                Relation::left_of},
                      32);
  const Tensor extra = render(SceneSpec{{{ShapeKind::circle, Color::green, 2, 1, SizeClass::small}}, std::nullopt}, 32);
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] += extra[i];
  EXPECT_TRUE(classify_image(img).rejected);
}

TEST(Classify, SwappingRedAndBlueChannelsSwapsColors) {
  Rng rng(7);
  int checked = 0;
  while (checked < 300) {
    SceneSpec spec = generate_scene(rng).first;
    if (std::any_of(spec.objects.begin(), spec.objects.end(), [](auto& o) { return o.color == Color::yellow; })) continue;
    Tensor img = render(spec, 32);
    for (int p = 0; p < 32 * 32; ++p) std::swap(img[p], img[2048 + p]);
    for (auto& o : spec.objects) {
      if (o.color == Color::red) {
        o.color = Color::blue;
      } else if (o.color == Color::blue) {
        o.color = Color::red;
      }
    }
    const Classification c = classify_image(img);
    ASSERT_FALSE(c.rejected);
    EXPECT_EQ(c.spec, spec);
    ++checked;
  }
}

std::vector<PromptImage> rendered_prompts(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PromptImage> out;
  for (int i = 0; i < n; ++i) {
    const auto [spec, cap] = generate_scene(rng);
    out.push_back({cap, render(spec, 32)});
  }
  return out;
}

TEST(Alignment, RenderedPromptsScorePerfectly) {
  const AlignmentReport r = alignment_score(rendered_prompts(500, 3));
  EXPECT_EQ(r.n_samples, 500);
  EXPECT_EQ(r.n_rejected, 0);
  EXPECT_EQ(r.color_accuracy(), 1.0);
  EXPECT_EQ(r.shape_accuracy(), 1.0);
  EXPECT_EQ(r.spatial_accuracy(), 1.0);
  EXPECT_EQ(r.color_evaluated, r.shape_evaluated);
}

TEST(Alignment, EmptyListHasAbsentCategories) {
  const AlignmentReport r = alignment_score({});
  EXPECT_EQ(r.n_samples, 0);
  EXPECT_FALSE(r.color_accuracy().has_value());
  EXPECT_FALSE(r.spatial_accuracy().has_value());
  EXPECT_FALSE(r.mean_accuracy().has_value());
}

TEST(Alignment, SingleObjectPromptsLeaveSpatialAbsent) {
  std::vector<PromptImage> items;
  const SceneSpec s{{{ShapeKind::triangle, Color::yellow, 1, 1, SizeClass::large}}, std::nullopt};
  items.push_back({"a yellow triangle", render(s, 32)});
  items.push_back({"a blue triangle", render(s, 32)});
  const AlignmentReport r = alignment_score(items);
  EXPECT_EQ(r.color_accuracy(), 0.5);
  EXPECT_EQ(r.shape_accuracy(), 1.0);
  EXPECT_FALSE(r.spatial_accuracy().has_value());
  EXPECT_DOUBLE_EQ(*r.mean_accuracy(), 0.75);
}

TEST(Alignment, UnparseablePromptsAreExcluded) {
  auto items = rendered_prompts(3, 4);
  items[1].prompt = "a dog on a skateboard";
  const AlignmentReport r = alignment_score(items);
  EXPECT_EQ(r.n_samples, 2);
  EXPECT_EQ(r.n_excluded, 1);
  EXPECT_EQ(r.records.size(), 3u);
  EXPECT_FALSE(r.records[1].parsed);
}

TEST(Alignment, RejectCountsAsFailureEverywhere) {
  std::vector<PromptImage> items = {{"a red circle left of a blue square", Tensor({3, 32, 32})},
                                    {"a green square", Tensor({3, 32, 32})}};
  const AlignmentReport r = alignment_score(items);
  EXPECT_EQ(r.n_rejected, 2);
  EXPECT_EQ(r.color_evaluated, 3);
  EXPECT_EQ(r.shape_evaluated, 3);
  EXPECT_EQ(r.spatial_evaluated, 1);
  EXPECT_EQ(r.color_accuracy(), 0.0);
  EXPECT_EQ(r.spatial_accuracy(), 0.0);
}

TEST(Alignment, ShuffledPromptsAreAtChance) {
  Rng rng(55);
  std::vector<PromptImage> items;
  std::vector<std::string> caps;
  while (items.size() < 2000) {
    const auto [spec, cap] = generate_scene(rng);
    if (spec.objects.size() != 1) continue;
    items.push_back({cap, render(spec, 32)});
    caps.push_back(cap);
  }
  std::mt19937_64 g(56);
  std::shuffle(caps.begin(), caps.end(), g);
  for (std::size_t i = 0; i < items.size(); ++i) items[i].prompt = caps[i];
  const AlignmentReport r = alignment_score(items);
  EXPECT_NEAR(*r.color_accuracy(), 0.25, 0.05);
  EXPECT_NEAR(*r.shape_accuracy(), 1.0 / 3.0, 0.05);
}

TEST(Alignment, NoiseNeverImprovesAccuracy) {
  const auto clean = rendered_prompts(1000, 8);
  double prev_color = 1, prev_shape = 1, prev_spatial = 1;
  Rng noise(9);
  for (const double sigma : {0.05, 0.1, 0.2}) {
    auto noisy = clean;
    for (auto& item : noisy) {
      for (auto& v : item.image.data()) v = std::clamp(v + sigma * noise.normal(), -1.0, 1.0);
    }
    const AlignmentReport r = alignment_score(noisy);
    EXPECT_LE(*r.color_accuracy(), prev_color) << sigma;
    EXPECT_LE(*r.shape_accuracy(), prev_shape) << sigma;
    EXPECT_LE(*r.spatial_accuracy(), prev_spatial) << sigma;
    prev_color = *r.color_accuracy();
    prev_shape = *r.shape_accuracy();
    prev_spatial = *r.spatial_accuracy();
  }
}

TEST(Features, FixedLengthAndFinite) {
  const auto f = image_features(render(SceneSpec{}, 32));
  EXPECT_EQ(static_cast<int>(f.size()), kFeatureDim);
  for (double v : f) EXPECT_TRUE(std::isfinite(v));
}

std::vector<std::vector<double>> gaussian_rows(int n, int d, double shift, double scale, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (auto& r : rows) {
    for (auto& v : r) v = shift + scale * rng.normal();
  }
  return rows;
}

TEST(Frechet, IdentitySymmetryAndClosedForms) {
  const auto a = gaussian_rows(300, 5, 0, 1, 1), b = gaussian_rows(300, 5, 0.7, 1.5, 2);
  EXPECT_LE(frechet_distance(a, a), 1e-8);
  EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-10);
  EXPECT_GT(frechet_distance(a, b), 0.0);
  EXPECT_NEAR(frechet_from_moments({0.0}, {1.0}, {1.0}, {1.0}), 1.0, 1e-12);
  // Commuting diagonal covariances: trace term is sum (sqrt(a) - sqrt(b))^2.
  const double got = frechet_from_moments({1, 2}, {4, 0, 0, 9}, {1, 0}, {1, 0, 0, 16});
  EXPECT_NEAR(got, 4.0 + (2 - 1) * (2 - 1) + (3 - 4) * (3 - 4), 1e-8);
}

TEST(Frechet, DegenerateInputsAreNumericalErrors) {
  const auto a = gaussian_rows(10, 3, 0, 1, 3);
  EXPECT_THROW(frechet_distance(a, {a[0]}), NumericalError);
  // Three samples in five dimensions: singular covariance without eps.
  const auto few = gaussian_rows(3, 5, 0, 1, 4);
  EXPECT_THROW(frechet_distance(few, few, FrechetConfig{0.0}), NumericalError);
}

}  // namespace
}  // namespace lavi
