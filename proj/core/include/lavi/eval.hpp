#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lavi/scene.hpp"
#include "lavi/tensor.hpp"

namespace lavi {

struct DetectedObject {
  SceneObject object;
  double cx = 0, cy = 0;  // centroid in pixel coordinates
  double fill = 0;        // pixel count / bounding-box area
  std::int64_t pixels = 0;
  double color_distance = 0;  // distance of the mean color to the chosen canonical color
};

// Result of the inverse-rendering oracle. A rejected image carries the
// reason and no spec.
struct Classification {
  bool rejected = true;
  std::string reason;
  SceneSpec spec;  // canonical form (relation left_of or above)
  std::vector<DetectedObject> detections;  // ordered as in spec
};

// image: [3, res, res] in [-1, 1].
Classification classify_image(const Tensor& image);

struct SampleRecord {
  std::string prompt;
  bool parsed = false;
  bool rejected = false;
  std::string reject_reason;
  int color_matched = 0, color_evaluated = 0;
  int shape_matched = 0, shape_evaluated = 0;
  int spatial_matched = 0, spatial_evaluated = 0;
};

struct AlignmentReport {
  std::int64_t n_samples = 0;  // scored samples (excludes unparseable prompts)
  std::int64_t n_excluded = 0;
  std::int64_t n_rejected = 0;
  std::int64_t color_matched = 0, color_evaluated = 0;
  std::int64_t shape_matched = 0, shape_evaluated = 0;
  std::int64_t spatial_matched = 0, spatial_evaluated = 0;
  std::vector<SampleRecord> records;

  // nullopt when no scored prompt exercises the category.
  std::optional<double> color_accuracy() const;
  std::optional<double> shape_accuracy() const;
  std::optional<double> spatial_accuracy() const;
  // Mean of the present category accuracies.
  std::optional<double> mean_accuracy() const;
};

struct PromptImage {
  std::string prompt;
  Tensor image;
};

AlignmentReport alignment_score(const std::vector<PromptImage>& samples);

// Scores one already classified image against one prompt.
SampleRecord score_sample(const std::string& prompt, const Classification& c);

inline constexpr int kFeatureDim = 32;

// Fixed statistics used as the Fréchet feature space: channel moments,
// canonical-color fractions, a 4x4 foreground map and component statistics.
std::vector<double> image_features(const Tensor& image);

struct FrechetConfig {
  double eps = 1e-6;  // added to both covariance diagonals; must be > 0
};

// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); rows are samples.
// Throws NumericalError for eps <= 0 or fewer than two rows.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                        const FrechetConfig& cfg = {});

// Same formula from precomputed moments (covariances row-major d x d, eps
// not added).
double frechet_from_moments(const std::vector<double>& mu_a, const std::vector<double>& cov_a,
                            const std::vector<double>& mu_b, const std::vector<double>& cov_b);

}  // namespace lavi
