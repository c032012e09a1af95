#include "lavi/scene.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lavi/error.hpp"
#include "lavi/text.hpp"

namespace lavi {

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

std::string to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
  }
  return "?";
}

std::string to_string(SizeClass s) { return s == SizeClass::small ? "small" : "large"; }

std::string to_string(Relation r) {
  switch (r) {
    case Relation::left_of: return "left of";
    case Relation::right_of: return "right of";
    case Relation::above: return "above";
    case Relation::below: return "below";
  }
  return "?";
}

std::array<double, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {1, -1, -1};
    case Color::green: return {-1, 1, -1};
    case Color::blue: return {-1, -1, 1};
    case Color::yellow: return {1, 1, -1};
  }
  return {0, 0, 0};
}

SceneSpec SceneSpec::canonical() const {
  SceneSpec out = *this;
  if (objects.size() != 2 || !relation) return out;
  if (*relation == Relation::right_of) {
    std::swap(out.objects[0], out.objects[1]);
    out.relation = Relation::left_of;
  } else if (*relation == Relation::below) {
    std::swap(out.objects[0], out.objects[1]);
    out.relation = Relation::above;
  }
  return out;
}

bool SceneSpec::operator==(const SceneSpec& other) const {
  const SceneSpec a = canonical();
  const SceneSpec b = other.canonical();
  return a.objects == b.objects && a.relation == b.relation;
}

bool SceneSpec::valid() const {
  if (objects.empty() || objects.size() > 2) return false;
  for (const auto& o : objects) {
    if (o.row < 0 || o.row >= kGridCells || o.col < 0 || o.col >= kGridCells) return false;
  }
  if (objects.size() == 1) return !relation.has_value();
  if (!relation) return false;
  const auto& a = objects[0];
  const auto& b = objects[1];
  switch (*relation) {
    case Relation::left_of: return a.row == b.row && a.col < b.col;
    case Relation::right_of: return a.row == b.row && a.col > b.col;
    case Relation::above: return a.col == b.col && a.row < b.row;
    case Relation::below: return a.col == b.col && a.row > b.row;
  }
  return false;
}

std::string describe(const SceneSpec& spec) {
  std::ostringstream os;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    if (i) os << (spec.relation ? " " + to_string(*spec.relation) + " " : " ");
    os << to_string(o.size) << ' ' << to_string(o.color) << ' ' << to_string(o.shape) << " @(" << o.row << ','
       << o.col << ')';
  }
  return os.str();
}

std::string to_json(const SceneSpec& spec) {
  std::ostringstream os;
  os << "{\"objects\":[";
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    if (i) os << ',';
    os << "{\"shape\":\"" << to_string(o.shape) << "\",\"color\":\"" << to_string(o.color) << "\",\"row\":" << o.row
       << ",\"col\":" << o.col << ",\"size\":\"" << to_string(o.size) << "\"}";
  }
  os << "],\"relation\":";
  if (spec.relation) {
    os << '"' << to_string(*spec.relation) << '"';
  } else {
    os << "null";
  }
  os << '}';
  return os.str();
}

std::string caption(const SceneSpec& spec) {
  LAVI_EXPECT(!spec.objects.empty() && spec.objects.size() <= 2, "caption: scene needs one or two objects");
  auto phrase = [](const SceneObject& o) { return "a " + to_string(o.color) + " " + to_string(o.shape); };
  if (spec.objects.size() == 1) return phrase(spec.objects[0]);
  LAVI_EXPECT(spec.relation.has_value(), "caption: two-object scene without a relation");
  return phrase(spec.objects[0]) + " " + to_string(*spec.relation) + " " + phrase(spec.objects[1]);
}

namespace {

SceneObject random_object(Rng& rng) {
  SceneObject o;
  o.shape = static_cast<ShapeKind>(rng.uniform_int(0, 2));
  o.color = static_cast<Color>(rng.uniform_int(0, 3));
  o.size = static_cast<SizeClass>(rng.uniform_int(0, 1));
  return o;
}

}  // namespace

std::pair<SceneSpec, std::string> generate_scene(Rng& rng) {
  SceneSpec spec;
  const bool two = rng.bernoulli(0.5);
  SceneObject a = random_object(rng);
  if (!two) {
    a.row = static_cast<int>(rng.uniform_int(0, kGridCells - 1));
    a.col = static_cast<int>(rng.uniform_int(0, kGridCells - 1));
    spec.objects = {a};
  } else {
    SceneObject b = random_object(rng);
    const auto rel = static_cast<Relation>(rng.uniform_int(0, 3));
    const int line = static_cast<int>(rng.uniform_int(0, kGridCells - 1));
    // Two distinct ordered positions lo < hi along the line.
    const int lo = static_cast<int>(rng.uniform_int(0, kGridCells - 2));
    const int hi = static_cast<int>(rng.uniform_int(lo + 1, kGridCells - 1));
    const bool a_first = rel == Relation::left_of || rel == Relation::above;
    const int pa = a_first ? lo : hi;
    const int pb = a_first ? hi : lo;
    if (rel == Relation::left_of || rel == Relation::right_of) {
      a.row = b.row = line;
      a.col = pa;
      b.col = pb;
    } else {
      a.col = b.col = line;
      a.row = pa;
      b.row = pb;
    }
    spec.objects = {a, b};
    spec.relation = rel;
  }
  return {spec, caption(spec)};
}

std::optional<PromptSpec> parse_caption(std::string_view text) {
  const auto words = split_words(text);
  std::size_t i = 0;
  auto object = [&]() -> std::optional<PromptSpec::Object> {
    if (i + 3 > words.size() || words[i] != "a") return std::nullopt;
    std::optional<Color> color;
    for (int c = 0; c < 4; ++c)
      if (words[i + 1] == to_string(static_cast<Color>(c))) color = static_cast<Color>(c);
    std::optional<ShapeKind> shape;
    for (int s = 0; s < 3; ++s)
      if (words[i + 2] == to_string(static_cast<ShapeKind>(s))) shape = static_cast<ShapeKind>(s);
    if (!color || !shape) return std::nullopt;
    i += 3;
    return PromptSpec::Object{*color, *shape};
  };

  PromptSpec p;
  auto first = object();
  if (!first) return std::nullopt;
  p.objects.push_back(*first);
  if (i == words.size()) return p;

  if (i + 2 <= words.size() && words[i + 1] == "of" && (words[i] == "left" || words[i] == "right")) {
    p.relation = words[i] == "left" ? Relation::left_of : Relation::right_of;
    i += 2;
  } else if (words[i] == "above" || words[i] == "below") {
    p.relation = words[i] == "above" ? Relation::above : Relation::below;
    i += 1;
  } else {
    return std::nullopt;
  }
  auto second = object();
  if (!second || i != words.size()) return std::nullopt;
  p.objects.push_back(*second);
  return p;
}

int SceneGeometry::half_extent(SizeClass s) const {
  return s == SizeClass::small ? resolution * 3 / 32 : resolution * 4 / 32;
}

int SceneGeometry::cell_center(int cell) const {
  return static_cast<int>(std::floor((cell + 0.5) * resolution / kGridCells));
}

int SceneGeometry::cell_of(double coord) const {
  const int c = static_cast<int>(std::floor(coord * kGridCells / resolution));
  return std::clamp(c, 0, kGridCells - 1);
}

namespace {

bool inside(ShapeKind shape, int dx, int dy, int h) {
  if (std::abs(dx) > h || std::abs(dy) > h) return false;
  switch (shape) {
    case ShapeKind::square: return true;
    case ShapeKind::circle: return dx * dx + dy * dy <= h * h + h;  // radius h + 1/2 on the integer grid
    case ShapeKind::triangle: {
      // Apex at the top row, base on the bottom row.
      const int from_top = dy + h;
      return std::abs(dx) <= from_top / 2;
    }
  }
  return false;
}

}  // namespace

Tensor render(const SceneSpec& spec, int resolution) {
  LAVI_EXPECT(resolution >= 1, "render: resolution must be positive");
  const SceneGeometry g{resolution};
  Tensor img({3, resolution, resolution});
  const std::int64_t plane = static_cast<std::int64_t>(resolution) * resolution;
  for (const auto& o : spec.objects) {
    const int cx = g.cell_center(o.col);
    const int cy = g.cell_center(o.row);
    const int h = g.half_extent(o.size);
    const auto rgb = color_rgb(o.color);
    for (int y = std::max(0, cy - h); y <= std::min(resolution - 1, cy + h); ++y)
      for (int x = std::max(0, cx - h); x <= std::min(resolution - 1, cx + h); ++x) {
        if (!inside(o.shape, x - cx, y - cy, h)) continue;
        for (int ch = 0; ch < 3; ++ch) img[ch * plane + static_cast<std::int64_t>(y) * resolution + x] = rgb[ch];
      }
  }
  return img;
}

}  // namespace lavi
