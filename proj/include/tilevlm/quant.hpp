#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tilevlm/nn.hpp"
#include "tilevlm/tensor.hpp"

namespace tvlm {

// Asymmetric 4-bit weight quantization over contiguous groups within each
// row. Group statistics: scale = (max - min) / 15, zero point = the code of
// value 0, codes packed two per byte (even element in the low nibble).
// Activations stay in double precision.
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group = 32;
  std::vector<double> scales;         // rows * groups_per_row
  std::vector<std::uint8_t> zeros;    // rows * groups_per_row
  std::vector<std::uint8_t> packed;   // ceil(rows * cols / 2) code pairs

  std::size_t groups_per_row() const { return cols / group; }

  std::uint8_t code_at(std::size_t r, std::size_t c) const {
    std::size_t idx = r * cols + c;
    std::uint8_t byte = packed[idx / 2];
    return (idx % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
  }

  double value_at(std::size_t r, std::size_t c) const {
    std::size_t g = r * groups_per_row() + c / group;
    return (static_cast<double>(code_at(r, c)) - static_cast<double>(zeros[g])) * scales[g];
  }
};

inline QuantizedTensor quantize_rows(const Tensor& w, std::size_t group = 32) {
  if (w.ndim() != 2) throw DimensionError("quantize_rows: need 2-d weight, got " + shape_string(w.shape()));
  if (group == 0) throw ParameterError("quantize_rows: group size must be positive");
  if (w.cols() % group != 0)
    throw ParameterError("quantize_rows: row length " + std::to_string(w.cols()) +
                         " is not a multiple of group size " + std::to_string(group) +
                         "; pad the weight before quantizing");
  QuantizedTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.group = group;
  std::size_t gpr = q.groups_per_row();
  q.scales.assign(q.rows * gpr, 1.0);
  q.zeros.assign(q.rows * gpr, 0);
  q.packed.assign((q.rows * q.cols + 1) / 2, 0);

  const auto& wv = w.value();
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t g = 0; g < gpr; ++g) {
      std::size_t c0 = g * group;
      std::size_t c1 = c0 + group;
      double lo = wv[r * q.cols + c0], hi = lo;
      for (std::size_t c = c0 + 1; c < c1; ++c) {
        double v = wv[r * q.cols + c];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      double scale = (hi - lo) / 15.0;
      if (scale == 0.0) scale = 1.0;
      long long zp = std::llround(-lo / scale);
      if (zp < 0) zp = 0;
      if (zp > 15) zp = 15;
      q.scales[r * gpr + g] = scale;
      q.zeros[r * gpr + g] = static_cast<std::uint8_t>(zp);
      for (std::size_t c = c0; c < c1; ++c) {
        long long code = std::llround(wv[r * q.cols + c] / scale) + zp;
        if (code < 0) code = 0;
        if (code > 15) code = 15;
        std::size_t idx = r * q.cols + c;
        if (idx % 2 == 0)
          q.packed[idx / 2] |= static_cast<std::uint8_t>(code);
        else
          q.packed[idx / 2] |= static_cast<std::uint8_t>(code << 4);
      }
    }
  }
  return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
  Tensor out = Tensor::zeros({q.rows, q.cols}, "dequant");
  auto& ov = out.mutable_value();
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c) ov[r * q.cols + c] = q.value_at(r, c);
  return out;
}

// x [m x k] against quantized weight rows [n x k], producing [m x n]. The
// loop skips exact-zero activations and accumulates over k ascending — the
// same term sequence as matmul(x, transpose(dequantize(q))), so the two are
// bit-identical, not merely close.
inline Tensor qmatmul(const Tensor& x, const QuantizedTensor& q, const char* tag = "tensor") {
  if (x.ndim() != 2 || x.cols() != q.cols)
    throw DimensionError("qmatmul: " + shape_string(x.shape()) + " against quantized [" +
                         std::to_string(q.rows) + " x " + std::to_string(q.cols) + "]");
  std::size_t m = x.rows(), k = x.cols(), n = q.rows;
  Tensor out = Tensor::zeros({m, n}, tag);
  auto& ov = out.mutable_value();
  const auto& xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      double a = xv[i * k + t];
      if (a == 0.0) continue;
      double* crow = ov.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a * q.value_at(j, t);
    }
  }
  flops_add(2ull * m * k * n);
  return out;
}

// Quantize every 2-d ".weight" parameter (the affine-map weights). Norm
// gains/biases, embedding tables, and all bias vectors stay in doubles.
inline bool should_quantize(const std::string& name, const Tensor& t) {
  return t.ndim() == 2 && name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

inline std::map<std::string, QuantizedTensor> quantize_params(ParamMap& pm, std::size_t group) {
  std::map<std::string, QuantizedTensor> out;
  for (auto& [name, t] : pm.items)
    if (should_quantize(name, t)) out.emplace(name, quantize_rows(t, group));
  return out;
}

// Overwrite every quantizable weight with its dequantized codes in place.
// Running the float engine afterwards multiplies by exactly the values
// qmatmul would reconstruct, so it is a faithful stand-in for quantized
// execution.
inline void apply_quantization(ParamMap& pm, std::size_t group) {
  for (auto& [name, t] : pm.items) {
    if (!should_quantize(name, t)) continue;
    QuantizedTensor q = quantize_rows(t, group);
    auto& v = t.mutable_value();
    for (std::size_t r = 0; r < q.rows; ++r)
      for (std::size_t c = 0; c < q.cols; ++c) v[r * q.cols + c] = q.value_at(r, c);
  }
}

}  // namespace tvlm
