#pragma once

#include <torch/torch.h>

#include <cstdint>

#include "mlg/instrumentation.hpp"

namespace mlg {

/// Scaled dot-product attention over already-projected tokens.
/// q: [B, nq, C], k/v: [B, nk, C]; returns [B, nq, C]. When `instr` is
/// non-null the post-softmax row sums are recorded.
torch::Tensor sdp_attention(const torch::Tensor& q, const torch::Tensor& k,
                            const torch::Tensor& v, int64_t heads,
                            Instrumentation* instr = nullptr);

/// Fixed 2-d sinusoidal position encoding, returned as [h*w, dim].
/// dim must be divisible by 4 (half for rows, half for columns).
torch::Tensor sinusoidal_position_encoding_2d(int64_t h, int64_t w, int64_t dim,
                                              const torch::TensorOptions& opts);

/// Fixed 1-d sinusoidal position encoding, returned as [n, dim]. dim even.
torch::Tensor sinusoidal_position_encoding_1d(int64_t n, int64_t dim,
                                              const torch::TensorOptions& opts);

/// In-place truncated normal init on [mean - 2*std, mean + 2*std], the
/// inverse-CDF construction.
void trunc_normal_(torch::Tensor& t, double std_dev, double mean = 0.0);

}  // namespace mlg
