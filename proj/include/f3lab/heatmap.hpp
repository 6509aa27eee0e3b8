// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "f3lab/binary_io.hpp"
#include "f3lab/model.hpp"

namespace f3lab {

/// (L, M) attention map, max over heads, with the min-max scale used for the image.
struct Heatmap {
  Tensor values;
  double lo = 0.0;
  double hi = 0.0;
  bool degenerate = false;  // hi == lo; the image is uniform
};

inline Heatmap make_heatmap(const AttentionTensor& a) {
  Heatmap h;
  h.values = a.max_over_heads();
  const auto [lo, hi] = std::minmax_element(h.values.data().begin(), h.values.data().end());
  h.lo = *lo;
  h.hi = *hi;
  h.degenerate = !(h.hi > h.lo);
  return h;
}

inline int quantize(const Heatmap& h, double v) {
  if (h.degenerate) return 0;
  return static_cast<int>(std::lround(255.0 * (v - h.lo) / (h.hi - h.lo)));
}

/// Plain-text grid: a header with dims and scale, then one row per layer.
inline std::string heatmap_text(const Heatmap& h) {
  std::ostringstream out;
  out << "# f3lab heatmap rows=" << h.values.rows() << " cols=" << h.values.cols() << " min=" << format_double(h.lo)
      << " max=" << format_double(h.hi) << " degenerate=" << (h.degenerate ? 1 : 0) << "\n";
  for (std::size_t r = 0; r < h.values.rows(); ++r) {
    for (std::size_t c = 0; c < h.values.cols(); ++c) out << (c ? " " : "") << format_double(h.values.at(r, c));
    out << "\n";
  }
  return out.str();
}

/// ASCII grayscale PGM (P2), one pixel per (layer, token), 255 = max.
inline std::string heatmap_pgm(const Heatmap& h) {
  std::ostringstream out;
  out << "P2\n# min=" << format_double(h.lo) << " max=" << format_double(h.hi)
      << " degenerate=" << (h.degenerate ? 1 : 0) << "\n"
      << h.values.cols() << " " << h.values.rows() << "\n255\n";
  for (std::size_t r = 0; r < h.values.rows(); ++r) {
    for (std::size_t c = 0; c < h.values.cols(); ++c) out << (c ? " " : "") << quantize(h, h.values.at(r, c));
    out << "\n";
  }
  return out.str();
}

/// Writes `<stem>.txt` and `<stem>.pgm`.
inline Heatmap heatmap_export(const AttentionTensor& a, const std::string& stem) {
  const Heatmap h = make_heatmap(a);
  write_file(stem + ".txt", heatmap_text(h));
  write_file(stem + ".pgm", heatmap_pgm(h));
  return h;
}

/// Reads a PGM written by heatmap_export and maps it back through the recorded scale.
inline Heatmap heatmap_import_pgm(const std::string& text) {
  std::istringstream in(text);
  std::string magic, hash, min_tok, max_tok, deg_tok;
  in >> magic;
  if (magic != "P2") throw CorruptFileError("heatmap: not an ASCII PGM");
  in >> hash >> min_tok >> max_tok >> deg_tok;
  auto field = [](const std::string& tok, const std::string& key) {
    if (tok.rfind(key + "=", 0) != 0) throw CorruptFileError("heatmap: missing " + key);
    return tok.substr(key.size() + 1);
  };
  Heatmap h;
  try {
    h.lo = std::stod(field(min_tok, "min"));
    h.hi = std::stod(field(max_tok, "max"));
    h.degenerate = field(deg_tok, "degenerate") == "1";
  } catch (const std::logic_error&) {
    throw CorruptFileError("heatmap: bad scale header");
  }
  std::size_t cols = 0, rows = 0;
  int maxval = 0;
  if (!(in >> cols >> rows >> maxval) || maxval != 255 || cols == 0 || rows == 0) {
    throw CorruptFileError("heatmap: bad dimensions");
  }
  h.values = Tensor({rows, cols});
  for (std::size_t i = 0; i < rows * cols; ++i) {
    int q = 0;
    if (!(in >> q) || q < 0 || q > 255) throw CorruptFileError("heatmap: bad pixel");
    h.values[i] = h.degenerate ? h.lo : h.lo + (h.hi - h.lo) * static_cast<double>(q) / 255.0;
  }
  return h;
}

inline Heatmap heatmap_import(const std::string& stem) { return heatmap_import_pgm(read_file(stem + ".pgm")); }

}  // namespace f3lab
