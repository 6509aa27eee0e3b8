// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "f3lab/binary_io.hpp"
#include "f3lab/model.hpp"
#include "f3lab/rng.hpp"
#include "f3lab/tensor.hpp"

namespace f3lab {

// ---------------------------------------------------------------------------
// Vocabulary and answers

inline constexpr std::array<std::string_view, 32> kVocabulary = {
    "what", "color",   "is",    "the",   "square", "circle", "triangle", "?",       "of",      "which",   "in",
    "image", "there",  "a",     "any",   "do",     "you",    "see",      "how",     "many",    "shapes",  "are",
    "objects", "count", "picture", "this", "does",  "contain", "have",    "it",      "shape",   "colour"};

inline std::size_t token_id(std::string_view word) {
  auto it = std::find(kVocabulary.begin(), kVocabulary.end(), word);
  if (it == kVocabulary.end()) throw ConfigError("word not in vocabulary: " + std::string(word));
  return static_cast<std::size_t>(it - kVocabulary.begin());
}

inline std::string detokenize(const TokenSeq& q) {
  std::string s;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (i) s += ' ';
    s += q.ids[i] < kVocabulary.size() ? std::string(kVocabulary[q.ids[i]]) : "<unk>";
  }
  return s;
}

enum class Answer : std::uint8_t { No, Yes, One, Two, Three, Red, Green, Blue };
inline constexpr std::size_t kAnswerCount = 8;
inline constexpr std::array<std::string_view, kAnswerCount> kAnswerNames = {"no",  "yes",   "one",  "two",
                                                                             "three", "red", "green", "blue"};

enum class QType : std::uint8_t { YesNo, Number, Other };
inline constexpr std::array<std::string_view, 3> kQTypeNames = {"yes/no", "number", "other"};

enum class ShapeKind : std::uint8_t { Square, Circle, Triangle };
enum class Color : std::uint8_t { Red, Green, Blue };
inline constexpr std::array<std::string_view, 3> kShapeWords = {"square", "circle", "triangle"};

inline constexpr std::array<std::array<double, 3>, 3> kPalette = {{
    {0.85, 0.15, 0.15},
    {0.15, 0.75, 0.20},
    {0.20, 0.30, 0.90},
}};
inline constexpr std::array<double, 3> kBackground = {0.45, 0.45, 0.45};
/// Shapes are drawn at this blend between the background and the full hue.
inline constexpr double kShapeContrast = 0.4;

inline std::array<double, 3> shape_rgb(Color color) {
  std::array<double, 3> rgb = kPalette[static_cast<std::size_t>(color)];
  for (std::size_t c = 0; c < 3; ++c) rgb[c] = kBackground[c] + kShapeContrast * (rgb[c] - kBackground[c]);
  return rgb;
}

// ---------------------------------------------------------------------------
// Scenes

struct SceneShape {
  ShapeKind kind;
  Color color;
  std::uint8_t row;  // cell coordinates
  std::uint8_t col;
  friend bool operator==(const SceneShape&, const SceneShape&) = default;
};

struct Scene {
  std::vector<SceneShape> shapes;
  friend bool operator==(const Scene&, const Scene&) = default;
};

struct ImageGeometry {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  std::size_t cell = 4;  // one shape per cell; equals the model's patch size

  std::size_t grid_rows() const { return height / cell; }
  std::size_t grid_cols() const { return width / cell; }
  friend bool operator==(const ImageGeometry&, const ImageGeometry&) = default;

  static ImageGeometry from(const ModelConfig& cfg) {
    return {cfg.image_height, cfg.image_width, cfg.channels, cfg.patch};
  }
};

inline bool shape_covers(ShapeKind kind, std::size_t y, std::size_t x, std::size_t cell) {
  switch (kind) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Circle:
      return !((y == 0 || y == cell - 1) && (x == 0 || x == cell - 1));
    case ShapeKind::Triangle:
      return x <= y;
  }
  return false;
}

/// Crisp rendering, no anti-aliasing.
inline Tensor render(const Scene& scene, const ImageGeometry& g) {
  if (g.channels != 3) throw ConfigError("renderer requires 3 channels");
  Tensor img({g.height, g.width, g.channels});
  for (std::size_t i = 0; i < g.height * g.width; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img[i * 3 + c] = kBackground[c];
  }
  for (const SceneShape& s : scene.shapes) {
    const auto rgb = shape_rgb(s.color);
    for (std::size_t y = 0; y < g.cell; ++y) {
      for (std::size_t x = 0; x < g.cell; ++x) {
        if (!shape_covers(s.kind, y, x, g.cell)) continue;
        const std::size_t py = s.row * g.cell + y, px = s.col * g.cell + x;
        for (std::size_t c = 0; c < 3; ++c) img[(py * g.width + px) * 3 + c] = rgb[c];
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Samples and datasets

struct Sample {
  Scene scene;
  TokenSeq question;
  std::size_t answer_label = 0;
  QType qtype = QType::Other;
  Tensor image;
  // Perturbation norms relative to the source image (adversarial / purified sets).
  double l1 = 0.0;
  double linf = 0.0;
  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Split : std::uint8_t { Train, Eval };

struct QTypeMix {
  double yes_no = 0.384;
  double number = 0.140;
  double other = 0.476;
  friend bool operator==(const QTypeMix&, const QTypeMix&) = default;
};

struct Dataset {
  std::string kind = "dataset";  // "dataset", "adversarial" or "purified"
  std::string metadata = "{}";   // JSON provenance
  std::uint64_t seed = 0;
  Split split = Split::Train;
  QTypeMix mix;
  ImageGeometry geometry;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Exact per-type counts by largest remainder; ties go to the earlier type.
inline std::array<std::size_t, 3> qtype_quota(std::size_t n, const QTypeMix& mix) {
  const std::array<double, 3> p = {mix.yes_no, mix.number, mix.other};
  std::array<std::size_t, 3> count{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = p[i] * static_cast<double>(n);
    count[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(count[i]);
    assigned += count[i];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i) {
      if (frac[i] > frac[best]) best = i;
    }
    ++count[best];
    frac[best] = -1.0;
    ++assigned;
  }
  return count;
}

namespace detail {

inline std::vector<std::size_t> words(std::initializer_list<std::string_view> ws) {
  std::vector<std::size_t> ids;
  for (auto w : ws) ids.push_back(token_id(w));
  return ids;
}

inline TokenSeq color_question(std::size_t tmpl, ShapeKind kind) {
  const auto s = kShapeWords[static_cast<std::size_t>(kind)];
  switch (tmpl) {
    case 0:
      return {words({"what", "color", "is", "the", s, "?"})};
    case 1:
      return {words({"what", "is", "the", "colour", "of", "the", s, "?"})};
    default:
      return {words({"which", "color", "is", "the", s, "in", "the", "image"})};
  }
}

inline TokenSeq presence_question(std::size_t tmpl, ShapeKind kind) {
  const auto s = kShapeWords[static_cast<std::size_t>(kind)];
  switch (tmpl) {
    case 0:
      return {words({"is", "there", "a", s, "?"})};
    case 1:
      return {words({"is", "there", "any", s, "in", "the", "image", "?"})};
    case 2:
      return {words({"do", "you", "see", "a", s, "?"})};
    default:
      return {words({"does", "the", "picture", "contain", "a", s, "?"})};
  }
}

inline TokenSeq count_question(std::size_t tmpl) {
  switch (tmpl) {
    case 0:
      return {words({"how", "many", "shapes", "are", "there", "?"})};
    case 1:
      return {words({"how", "many", "objects", "are", "in", "the", "image", "?"})};
    default:
      return {words({"count", "the", "shapes", "in", "this", "picture", "?"})};
  }
}

inline std::uint64_t sample_key(const Scene& scene, const TokenSeq& q) {
  std::vector<SceneShape> shapes = scene.shapes;
  std::sort(shapes.begin(), shapes.end(), [](const SceneShape& a, const SceneShape& b) {
    return std::tie(a.row, a.col) < std::tie(b.row, b.col);
  });
  std::string bytes;
  for (const auto& s : shapes) {
    bytes += static_cast<char>(s.kind);
    bytes += static_cast<char>(s.color);
    bytes += static_cast<char>(s.row);
    bytes += static_cast<char>(s.col);
  }
  bytes += '|';
  for (auto id : q.ids) bytes += static_cast<char>(id);
  return splitmix64(fnv1a64(bytes));
}

}  // namespace detail

inline std::size_t count_kind(const Scene& scene, ShapeKind kind) {
  return static_cast<std::size_t>(
      std::count_if(scene.shapes.begin(), scene.shapes.end(), [&](const SceneShape& s) { return s.kind == kind; }));
}

/// Deterministic synthetic VQA set. Scenes are sampled first, then rendered,
/// then a question of the scheduled type is chosen and answered from the scene.
/// Train and eval draw from complementary halves of the (scene, question) hash space.
inline Dataset generate(std::size_t n, std::uint64_t seed, const QTypeMix& mix = {}, Split split = Split::Train,
                        const ImageGeometry& geometry = {}) {
  if (n == 0) throw ConfigError("dataset size must be >= 1");
  if (mix.yes_no < 0 || mix.number < 0 || mix.other < 0 ||
      std::abs(mix.yes_no + mix.number + mix.other - 1.0) > 1e-9) {
    throw ConfigError("question-type mix must be nonnegative and sum to 1");
  }
  if (geometry.cell == 0 || geometry.height % geometry.cell || geometry.width % geometry.cell ||
      geometry.grid_rows() * geometry.grid_cols() < 3) {
    throw ConfigError("image geometry must hold at least 3 whole cells");
  }

  Dataset ds;
  ds.seed = seed;
  ds.split = split;
  ds.mix = mix;
  ds.geometry = geometry;
  Rng rng(derive_seed(seed, {0x5345545eull, static_cast<std::uint64_t>(split)}));

  const auto quota = qtype_quota(n, mix);
  std::vector<QType> schedule;
  for (std::size_t t = 0; t < 3; ++t) schedule.insert(schedule.end(), quota[t], static_cast<QType>(t));
  rng.shuffle(schedule);

  const std::size_t cells = geometry.grid_rows() * geometry.grid_cols();
  const std::uint64_t parity = split == Split::Train ? 0 : 1;
  for (QType qt : schedule) {
    for (;;) {
      Scene scene;
      const std::size_t count = 1 + rng.index(3);
      std::vector<std::size_t> free(cells);
      for (std::size_t i = 0; i < cells; ++i) free[i] = i;
      for (std::size_t k = 0; k < count; ++k) {
        const std::size_t pick = rng.index(free.size());
        const std::size_t cell = free[pick];
        free.erase(free.begin() + static_cast<std::ptrdiff_t>(pick));
        scene.shapes.push_back(SceneShape{static_cast<ShapeKind>(rng.index(3)), static_cast<Color>(rng.index(3)),
                                          static_cast<std::uint8_t>(cell / geometry.grid_cols()),
                                          static_cast<std::uint8_t>(cell % geometry.grid_cols())});
      }

      Sample s;
      s.qtype = qt;
      if (qt == QType::YesNo) {
        const auto kind = static_cast<ShapeKind>(rng.index(3));
        s.question = detail::presence_question(rng.index(4), kind);
        s.answer_label = static_cast<std::size_t>(count_kind(scene, kind) > 0 ? Answer::Yes : Answer::No);
      } else if (qt == QType::Number) {
        s.question = detail::count_question(rng.index(3));
        s.answer_label = static_cast<std::size_t>(Answer::One) + scene.shapes.size() - 1;
      } else {
        std::vector<ShapeKind> unique;
        for (std::size_t k = 0; k < 3; ++k) {
          if (count_kind(scene, static_cast<ShapeKind>(k)) == 1) unique.push_back(static_cast<ShapeKind>(k));
        }
        if (unique.empty()) continue;  // no unambiguous color question for this scene
        const ShapeKind kind = unique[rng.index(unique.size())];
        s.question = detail::color_question(rng.index(3), kind);
        const auto it = std::find_if(scene.shapes.begin(), scene.shapes.end(),
                                     [&](const SceneShape& sh) { return sh.kind == kind; });
        s.answer_label = static_cast<std::size_t>(Answer::Red) + static_cast<std::size_t>(it->color);
      }
      if (detail::sample_key(scene, s.question) % 2 != parity) continue;
      s.image = render(scene, geometry);
      s.scene = std::move(scene);
      ds.samples.push_back(std::move(s));
      break;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string serialize_dataset(const Dataset& ds, std::uint32_t version = kDatasetVersion) {
  ByteWriter w;
  w.str(ds.kind);
  w.str(ds.metadata);
  w.u64(ds.seed);
  w.u8(static_cast<std::uint8_t>(ds.split));
  w.f64(ds.mix.yes_no);
  w.f64(ds.mix.number);
  w.f64(ds.mix.other);
  w.u64(ds.geometry.height);
  w.u64(ds.geometry.width);
  w.u64(ds.geometry.channels);
  w.u64(ds.geometry.cell);
  w.u64(ds.samples.size());
  for (const Sample& s : ds.samples) {
    w.u8(static_cast<std::uint8_t>(s.qtype));
    w.u64(s.answer_label);
    w.u64(s.question.ids.size());
    for (auto id : s.question.ids) w.u64(id);
    w.u8(static_cast<std::uint8_t>(s.scene.shapes.size()));
    for (const auto& sh : s.scene.shapes) {
      w.u8(static_cast<std::uint8_t>(sh.kind));
      w.u8(static_cast<std::uint8_t>(sh.color));
      w.u8(sh.row);
      w.u8(sh.col);
    }
    w.tensor(s.image);
    w.f64(s.l1);
    w.f64(s.linf);
  }
  return seal("F3DS", version, w.bytes());
}

inline Dataset deserialize_dataset(std::string_view bytes) {
  const std::string payload = unseal(bytes, "F3DS", kDatasetVersion, "dataset");
  ByteReader r(payload);
  Dataset ds;
  ds.kind = r.str();
  ds.metadata = r.str();
  ds.seed = r.u64();
  ds.split = static_cast<Split>(r.u8());
  ds.mix.yes_no = r.f64();
  ds.mix.number = r.f64();
  ds.mix.other = r.f64();
  ds.geometry.height = r.u64();
  ds.geometry.width = r.u64();
  ds.geometry.channels = r.u64();
  ds.geometry.cell = r.u64();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    Sample s;
    const auto qt = r.u8();
    if (qt > 2) throw CorruptFileError("corrupt dataset: bad question type");
    s.qtype = static_cast<QType>(qt);
    s.answer_label = r.u64();
    const std::uint64_t len = r.u64();
    if (len > 1024) throw CorruptFileError("corrupt dataset: question too long");
    for (std::uint64_t k = 0; k < len; ++k) s.question.ids.push_back(r.u64());
    const std::uint8_t shapes = r.u8();
    for (std::uint8_t k = 0; k < shapes; ++k) {
      SceneShape sh{};
      sh.kind = static_cast<ShapeKind>(r.u8());
      sh.color = static_cast<Color>(r.u8());
      sh.row = r.u8();
      sh.col = r.u8();
      s.scene.shapes.push_back(sh);
    }
    s.image = r.tensor();
    s.l1 = r.f64();
    s.linf = r.f64();
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw CorruptFileError("corrupt dataset: trailing bytes");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { write_file(path, serialize_dataset(ds)); }
inline Dataset load_dataset(const std::string& path) { return deserialize_dataset(read_file(path)); }

/// Content hash used to reference a source dataset from derived files.
inline std::string dataset_hash(const Dataset& ds) { return hex64(fnv1a64(serialize_dataset(ds))); }

}  // namespace f3lab
