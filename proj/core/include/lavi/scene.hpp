#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lavi/rng.hpp"
#include "lavi/tensor.hpp"

namespace lavi {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class SizeClass { small, large };
enum class Relation { left_of, right_of, above, below };

inline constexpr int kGridCells = 3;  // scenes live on a 3x3 grid

std::string to_string(ShapeKind s);
std::string to_string(Color c);
std::string to_string(SizeClass s);
std::string to_string(Relation r);  // caption words, e.g. "left of"

// Canonical RGB in [-1, 1].
std::array<double, 3> color_rgb(Color c);

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  int row = 0;  // grid cell, 0..2 top to bottom
  int col = 0;  // grid cell, 0..2 left to right
  SizeClass size = SizeClass::small;

  bool operator==(const SceneObject&) const = default;
};

// objects[0] stands in `relation` to objects[1] when there are two.
struct SceneSpec {
  std::vector<SceneObject> objects;
  std::optional<Relation> relation;

  // Same scene with two-object relations rewritten as left_of or above.
  SceneSpec canonical() const;
  // Compares canonical forms, so "A right of B" equals "B left of A".
  bool operator==(const SceneSpec& other) const;

  // True when objects are in distinct cells and the relation holds for the
  // cell centers.
  bool valid() const;
};

std::string describe(const SceneSpec& spec);  // debugging and golden text
std::string to_json(const SceneSpec& spec);   // one-line record for datasets

// "a {color} {shape}" or "a {color} {shape} {relation} a {color} {shape}".
std::string caption(const SceneSpec& spec);

// Uniform draw: one or two objects with probability 1/2 each, then uniform
// attributes and uniform placement. Two-object scenes share a row (left/right)
// or a column (above/below).
std::pair<SceneSpec, std::string> generate_scene(Rng& rng);

// What a caption asks for; positions and sizes are not part of the grammar.
struct PromptSpec {
  struct Object {
    Color color;
    ShapeKind shape;
    bool operator==(const Object&) const = default;
  };
  std::vector<Object> objects;
  std::optional<Relation> relation;
};

// nullopt if the text is outside the caption grammar.
std::optional<PromptSpec> parse_caption(std::string_view text);

// Pixel geometry shared by the renderer and the classifier.
struct SceneGeometry {
  int resolution = 32;

  int half_extent(SizeClass s) const;  // floor(res*3/32) or floor(res*4/32)
  int cell_center(int cell) const;     // pixel coordinate of a cell center
  int cell_of(double coord) const;     // grid cell containing a coordinate
};

// Hard-edged rasterization onto a gray (0) background. Returns [3, res, res].
Tensor render(const SceneSpec& spec, int resolution);

}  // namespace lavi
