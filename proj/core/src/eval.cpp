#include "lavi/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "lavi/error.hpp"

namespace lavi {

namespace {

constexpr double kForeground = 0.5;      // max |channel| above this is not background
constexpr double kColorRejectDist = 1.0;  // half the smallest gap between canonical colors

struct Component {
  std::int64_t pixels = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double sx = 0, sy = 0;
  double sum_rgb[3] = {0, 0, 0};
};

struct ImageView {
  const Tensor& img;
  int res;
  double at(int ch, int y, int x) const {
    return img[(static_cast<std::int64_t>(ch) * res + y) * res + x];
  }
  bool foreground(int y, int x) const {
    return std::max({std::abs(at(0, y, x)), std::abs(at(1, y, x)), std::abs(at(2, y, x))}) > kForeground;
  }
};

int check_image(const Tensor& image) {
  LAVI_EXPECT(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) == image.dim(2),
              "expected a [3, res, res] image, got " + shape_str(image.shape()));
  return static_cast<int>(image.dim(1));
}

// 4-connected foreground components in raster order of their first pixel.
std::vector<Component> components(const ImageView& v) {
  const int n = v.res;
  std::vector<int> label(static_cast<std::size_t>(n) * n, -1);
  std::vector<Component> out;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      if (label[static_cast<std::size_t>(y) * n + x] >= 0 || !v.foreground(y, x)) continue;
      const int id = static_cast<int>(out.size());
      Component c;
      c.x0 = c.x1 = x;
      c.y0 = c.y1 = y;
      stack.assign(1, {y, x});
      label[static_cast<std::size_t>(y) * n + x] = id;
      while (!stack.empty()) {
        const auto [cy, cx] = stack.back();
        stack.pop_back();
        ++c.pixels;
        c.sx += cx + 0.5;
        c.sy += cy + 0.5;
        for (int ch = 0; ch < 3; ++ch) c.sum_rgb[ch] += v.at(ch, cy, cx);
        c.x0 = std::min(c.x0, cx);
        c.x1 = std::max(c.x1, cx);
        c.y0 = std::min(c.y0, cy);
        c.y1 = std::max(c.y1, cy);
        const int dy[] = {-1, 1, 0, 0};
        const int dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || ny >= n || nx < 0 || nx >= n) continue;
          auto& l = label[static_cast<std::size_t>(ny) * n + nx];
          if (l >= 0 || !v.foreground(ny, nx)) continue;
          l = id;
          stack.emplace_back(ny, nx);
        }
      }
      out.push_back(c);
    }
  return out;
}

std::int64_t min_component_pixels(int res) {
  const int h = SceneGeometry{res}.half_extent(SizeClass::small);
  return std::max<std::int64_t>(2, static_cast<std::int64_t>(2 * h + 1) * (2 * h + 1) / 4);
}

std::vector<Component> significant_components(const ImageView& v) {
  auto all = components(v);
  const auto min_px = min_component_pixels(v.res);
  std::vector<Component> kept;
  for (auto& c : all)
    if (c.pixels >= min_px) kept.push_back(c);
  return kept;
}

std::pair<Color, double> nearest_color(const double rgb[3]) {
  Color best = Color::red;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 4; ++k) {
    const auto ref = color_rgb(static_cast<Color>(k));
    double d = 0;
    for (int ch = 0; ch < 3; ++ch) d += (rgb[ch] - ref[ch]) * (rgb[ch] - ref[ch]);
    d = std::sqrt(d);
    if (d < best_d) {
      best_d = d;
      best = static_cast<Color>(k);
    }
  }
  return {best, best_d};
}

}  // namespace

Classification classify_image(const Tensor& image) {
  const int res = check_image(image);
  const ImageView v{image, res};
  const SceneGeometry g{res};
  Classification out;
  auto comps = significant_components(v);
  if (comps.empty()) {
    out.reason = "no objects";
    return out;
  }
  if (comps.size() > 2) {
    out.reason = std::to_string(comps.size()) + " objects";
    return out;
  }
  const int small_extent = 2 * g.half_extent(SizeClass::small) + 1;
  for (const auto& c : comps) {
    DetectedObject d;
    d.pixels = c.pixels;
    d.cx = c.sx / static_cast<double>(c.pixels);
    d.cy = c.sy / static_cast<double>(c.pixels);
    const int w = c.x1 - c.x0 + 1, h = c.y1 - c.y0 + 1;
    d.fill = static_cast<double>(c.pixels) / (static_cast<double>(w) * h);
    double mean[3];
    for (int ch = 0; ch < 3; ++ch) mean[ch] = c.sum_rgb[ch] / static_cast<double>(c.pixels);
    const auto [color, dist] = nearest_color(mean);
    d.color_distance = dist;
    if (dist >= kColorRejectDist) {
      out.reason = "low color confidence";
      return out;
    }
    d.object.color = color;
    d.object.shape = d.fill > 0.9 ? ShapeKind::square : d.fill >= 0.65 ? ShapeKind::circle : ShapeKind::triangle;
    d.object.size = std::max(w, h) > small_extent ? SizeClass::large : SizeClass::small;
    d.object.col = g.cell_of(d.cx);
    d.object.row = g.cell_of(d.cy);
    out.detections.push_back(d);
  }
  if (out.detections.size() == 2) {
    auto& a = out.detections[0];
    auto& b = out.detections[1];
    const double dx = b.cx - a.cx, dy = b.cy - a.cy;
    const bool horizontal = std::abs(dx) >= std::abs(dy);
    if ((horizontal && dx < 0) || (!horizontal && dy < 0)) std::swap(a, b);
    out.spec.relation = horizontal ? Relation::left_of : Relation::above;
  }
  for (const auto& d : out.detections) out.spec.objects.push_back(d.object);
  out.rejected = false;
  return out;
}

namespace {

// Relation of a to b read from the dominant centroid axis.
Relation relation_between(const DetectedObject& a, const DetectedObject& b) {
  const double dx = a.cx - b.cx, dy = a.cy - b.cy;
  if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? Relation::left_of : Relation::right_of;
  return dy < 0 ? Relation::above : Relation::below;
}

bool horizontal(Relation r) { return r == Relation::left_of || r == Relation::right_of; }

}  // namespace

SampleRecord score_sample(const std::string& prompt, const Classification& c) {
  SampleRecord rec;
  rec.prompt = prompt;
  const auto target = parse_caption(prompt);
  if (!target) return rec;
  rec.parsed = true;
  const int n = static_cast<int>(target->objects.size());
  rec.color_evaluated = n;
  rec.shape_evaluated = n;
  rec.spatial_evaluated = n == 2 ? 1 : 0;
  if (c.rejected) {
    rec.rejected = true;
    rec.reject_reason = c.reason;
    return rec;
  }
  if (static_cast<int>(c.detections.size()) != n) {
    rec.reject_reason = "object count " + std::to_string(c.detections.size()) + " != " + std::to_string(n);
    return rec;
  }
  auto agree = [](const PromptSpec::Object& p, const DetectedObject& d) {
    return (p.color == d.object.color ? 1 : 0) + (p.shape == d.object.shape ? 1 : 0);
  };
  const DetectedObject* a = &c.detections[0];
  const DetectedObject* b = n == 2 ? &c.detections[1] : nullptr;
  if (n == 2) {
    const int keep = agree(target->objects[0], *a) + agree(target->objects[1], *b);
    const int swap = agree(target->objects[0], *b) + agree(target->objects[1], *a);
    if (swap > keep) std::swap(a, b);
  }
  const DetectedObject* assigned[2] = {a, b};
  for (int i = 0; i < n; ++i) {
    rec.color_matched += target->objects[static_cast<std::size_t>(i)].color == assigned[i]->object.color ? 1 : 0;
    rec.shape_matched += target->objects[static_cast<std::size_t>(i)].shape == assigned[i]->object.shape ? 1 : 0;
  }
  if (n == 2) {
    const Relation want = *target->relation;
    const Relation got = relation_between(*a, *b);
    // Indistinguishable objects satisfy both directions of an axis.
    const bool same = target->objects[0] == target->objects[1];
    rec.spatial_matched = (same ? horizontal(want) == horizontal(got) : want == got) ? 1 : 0;
  }
  return rec;
}

namespace {
std::optional<double> ratio(std::int64_t m, std::int64_t e) {
  if (e == 0) return std::nullopt;
  return static_cast<double>(m) / static_cast<double>(e);
}
}  // namespace

std::optional<double> AlignmentReport::color_accuracy() const { return ratio(color_matched, color_evaluated); }
std::optional<double> AlignmentReport::shape_accuracy() const { return ratio(shape_matched, shape_evaluated); }
std::optional<double> AlignmentReport::spatial_accuracy() const { return ratio(spatial_matched, spatial_evaluated); }

std::optional<double> AlignmentReport::mean_accuracy() const {
  double sum = 0;
  int k = 0;
  for (const auto& a : {color_accuracy(), shape_accuracy(), spatial_accuracy()}) {
    if (a) {
      sum += *a;
      ++k;
    }
  }
  if (k == 0) return std::nullopt;
  return sum / k;
}

AlignmentReport alignment_score(const std::vector<PromptImage>& samples) {
  AlignmentReport r;
  for (const auto& s : samples) {
    SampleRecord rec = parse_caption(s.prompt) ? score_sample(s.prompt, classify_image(s.image))
                                               : score_sample(s.prompt, Classification{});
    if (!rec.parsed) {
      ++r.n_excluded;
      r.records.push_back(std::move(rec));
      continue;
    }
    ++r.n_samples;
    if (rec.rejected) ++r.n_rejected;
    r.color_matched += rec.color_matched;
    r.color_evaluated += rec.color_evaluated;
    r.shape_matched += rec.shape_matched;
    r.shape_evaluated += rec.shape_evaluated;
    r.spatial_matched += rec.spatial_matched;
    r.spatial_evaluated += rec.spatial_evaluated;
    r.records.push_back(std::move(rec));
  }
  return r;
}

std::vector<double> image_features(const Tensor& image) {
  const int res = check_image(image);
  const ImageView v{image, res};
  std::vector<double> f;
  f.reserve(kFeatureDim);
  const double npx = static_cast<double>(res) * res;

  for (int ch = 0; ch < 3; ++ch) {
    double s = 0, s2 = 0;
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const double p = v.at(ch, y, x);
        s += p;
        s2 += p * p;
      }
    const double mean = s / npx;
    f.push_back(mean);
    f.push_back(std::sqrt(std::max(0.0, s2 / npx - mean * mean)));
  }

  // Fractions of pixels nearest to background gray and to each canonical color.
  double frac[5] = {0, 0, 0, 0, 0};
  double fg_map[16] = {};
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const double rgb[3] = {v.at(0, y, x), v.at(1, y, x), v.at(2, y, x)};
      const auto [color, dist] = nearest_color(rgb);
      const double gray = std::sqrt(rgb[0] * rgb[0] + rgb[1] * rgb[1] + rgb[2] * rgb[2]);
      frac[gray <= dist ? 0 : 1 + static_cast<int>(color)] += 1;
      if (v.foreground(y, x)) fg_map[(y * 4 / res) * 4 + x * 4 / res] += 1;
    }
  for (double c : frac) f.push_back(c / npx);
  const double cell_px = npx / 16.0;
  for (double c : fg_map) f.push_back(c / cell_px);

  const auto comps = significant_components(v);
  double fill = 0, extent = 0, largest = 0, fg = 0;
  for (const auto& c : comps) {
    const int w = c.x1 - c.x0 + 1, h = c.y1 - c.y0 + 1;
    fill += static_cast<double>(c.pixels) / (static_cast<double>(w) * h);
    extent += static_cast<double>(std::max(w, h)) / res;
    largest = std::max(largest, static_cast<double>(c.pixels) / npx);
    fg += static_cast<double>(c.pixels) / npx;
  }
  const double k = comps.empty() ? 1.0 : static_cast<double>(comps.size());
  f.push_back(std::min<double>(static_cast<double>(comps.size()), 3.0) / 2.0);
  f.push_back(fill / k);
  f.push_back(extent / k);
  f.push_back(largest);
  f.push_back(fg);
  return f;
}

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

double trace_sqrt_product(const Mat& a, const Mat& b) {
  // tr((A B)^{1/2}) = tr((A^{1/2} B A^{1/2})^{1/2}) for symmetric PSD A, B.
  Eigen::SelfAdjointEigenSolver<Mat> ea(a);
  Vec ra = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Mat sqrt_a = ea.eigenvectors() * ra.asDiagonal() * ea.eigenvectors().transpose();
  Mat m = sqrt_a * b * sqrt_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> em(m);
  return em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

double frechet(const Vec& mu_a, const Mat& ca, const Vec& mu_b, const Mat& cb) {
  const double mean_term = (mu_a - mu_b).squaredNorm();
  const double trace = ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(ca, cb);
  return std::max(0.0, mean_term + trace);
}

void moments(const std::vector<std::vector<double>>& rows, Vec& mu, Mat& cov) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  Mat x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    LAVI_EXPECT(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) == d,
                "frechet_distance: ragged feature rows");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  mu = x.colwise().mean().transpose();
  const Mat centered = x.rowwise() - mu.transpose();
  cov = centered.transpose() * centered / static_cast<double>(n - 1);
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                        const FrechetConfig& cfg) {
  if (a.size() < 2 || b.size() < 2) {
    throw NumericalError("frechet_distance: need at least two samples per set (got " + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()) + ")");
  }
  LAVI_EXPECT(a.front().size() == b.front().size(), "frechet_distance: feature dimensions differ");
  Vec mu_a, mu_b;
  Mat ca, cb;
  moments(a, mu_a, ca);
  moments(b, mu_b, cb);
  if (!(cfg.eps > 0)) {
    // Without regularization a rank-deficient covariance makes the square root ill-conditioned.
    for (const Mat* c : {&ca, &cb}) {
      Eigen::SelfAdjointEigenSolver<Mat> es(*c);
      const double top = std::max(es.eigenvalues().maxCoeff(), 1.0);
      if (es.eigenvalues().minCoeff() <= 1e-12 * top) {
        throw NumericalError(
            "frechet_distance: covariance is singular (fewer samples than feature dimensions or constant "
            "features); set a positive eps");
      }
    }
  } else {
    ca.diagonal().array() += cfg.eps;
    cb.diagonal().array() += cfg.eps;
  }
  return frechet(mu_a, ca, mu_b, cb);
}

double frechet_from_moments(const std::vector<double>& mu_a, const std::vector<double>& cov_a,
                            const std::vector<double>& mu_b, const std::vector<double>& cov_b) {
  const auto d = static_cast<Eigen::Index>(mu_a.size());
  LAVI_EXPECT(static_cast<Eigen::Index>(mu_b.size()) == d && static_cast<Eigen::Index>(cov_a.size()) == d * d &&
                  static_cast<Eigen::Index>(cov_b.size()) == d * d,
              "frechet_from_moments: inconsistent dimensions");
  const Vec ma = Eigen::Map<const Vec>(mu_a.data(), d);
  const Vec mb = Eigen::Map<const Vec>(mu_b.data(), d);
  const Mat ca = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov_a.data(), d, d);
  const Mat cb = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov_b.data(), d, d);
  return frechet(ma, ca, mb, cb);
}

}  // namespace lavi
