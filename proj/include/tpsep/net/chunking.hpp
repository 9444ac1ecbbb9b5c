#pragma once

// 50%-overlap chunking of an [N, L] feature map into [N, K, S] and its
// overlap-add inverse.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "tpsep/diff/graph.hpp"
#include "tpsep/diff/tensor.hpp"

namespace tpsep::net {

using diff::BackwardFn;
using diff::OpKind;
using diff::Shape;
using diff::Tensor;
using diff::Var;

struct ChunkLayout {
  std::size_t length = 0;      // L
  std::size_t padded = 0;      // L_pad
  std::size_t chunk = 0;       // K
  std::size_t num_chunks = 0;  // S

  std::size_t hop() const { return chunk / 2; }
};

inline ChunkLayout chunk_layout(std::size_t length, std::size_t k) {
  if (k < 2 || k % 2 != 0) {
    throw diff::ShapeError("segment: chunk length " + std::to_string(k) + " must be even");
  }
  ChunkLayout c;
  c.length = length;
  c.chunk = k;
  const std::size_t hop = k / 2;
  c.padded = std::max(length, k);
  if ((c.padded - k) % hop != 0) c.padded += hop - (c.padded - k) % hop;
  c.num_chunks = (c.padded - k) / hop + 1;
  return c;
}

/// Number of chunks covering every padded frame.
inline std::vector<std::size_t> coverage(const ChunkLayout& c) {
  std::vector<std::size_t> cov(c.padded, 0);
  for (std::size_t s = 0; s < c.num_chunks; ++s) {
    for (std::size_t k = 0; k < c.chunk; ++k) ++cov[s * c.hop() + k];
  }
  return cov;
}

/// [N, L] -> [N, K, S]; chunk s covers padded frames [s*K/2, s*K/2 + K).
template <typename T>
Var<T> segment(const Var<T>& f, std::size_t k) {
  const auto& fv = f.value();
  if (fv.rank() != 2) {
    throw diff::ShapeError("segment: feature map must be [N, L], got " + diff::to_string(fv.shape()));
  }
  const std::size_t n = fv.dim(0), len = fv.dim(1);
  const auto lay = chunk_layout(len, k);
  const std::size_t s_n = lay.num_chunks, hop = lay.hop();
  Tensor<T> out(Shape{n, k, s_n});
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t s = 0; s < s_n; ++s) {
        const std::size_t frame = s * hop + j;
        if (frame < len) out.at(c, j, s) = fv.at(c, frame);
      }
    }
  }
  return f.graph().record(OpKind::kSegment, {f}, std::move(out), [=] {
    return BackwardFn<T>([=](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      auto& df = *gi[0];
      for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t s = 0; s < s_n; ++s) {
            const std::size_t frame = s * hop + j;
            if (frame < len) df.at(c, frame) += g.at(c, j, s);
          }
        }
      }
    });
  });
}

/// [N, K, S] -> [N, original_length]: sums chunks at their offsets, divides
/// by coverage, trims padding.
template <typename T>
Var<T> overlap_add(const Var<T>& chunks, std::size_t original_length) {
  const auto& cv = chunks.value();
  if (cv.rank() != 3) {
    throw diff::ShapeError("overlap_add: chunks must be [N, K, S], got " +
                           diff::to_string(cv.shape()));
  }
  const std::size_t n = cv.dim(0), k = cv.dim(1), s_n = cv.dim(2);
  const auto lay = chunk_layout(original_length, k);
  if (lay.num_chunks != s_n) {
    throw diff::ShapeError("overlap_add: " + std::to_string(s_n) + " chunks but length " +
                           std::to_string(original_length) + " with K=" + std::to_string(k) +
                           " needs " + std::to_string(lay.num_chunks));
  }
  const auto cov = coverage(lay);
  const std::size_t hop = lay.hop(), len = original_length;
  Tensor<T> out(Shape{n, len});
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t s = 0; s < s_n; ++s) {
        const std::size_t frame = s * hop + j;
        if (frame < len) out.at(c, frame) += cv.at(c, j, s);
      }
    }
    for (std::size_t l = 0; l < len; ++l) out.at(c, l) /= static_cast<T>(cov[l]);
  }
  return chunks.graph().record(OpKind::kOverlapAdd, {chunks}, std::move(out), [=] {
    return BackwardFn<T>([=](const Tensor<T>& g, const std::vector<Tensor<T>*>& gi) {
      auto& dc = *gi[0];
      for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t s = 0; s < s_n; ++s) {
            const std::size_t frame = s * hop + j;
            if (frame < len) dc.at(c, j, s) += g.at(c, frame) / static_cast<T>(cov[frame]);
          }
        }
      }
    });
  });
}

}  // namespace tpsep::net
