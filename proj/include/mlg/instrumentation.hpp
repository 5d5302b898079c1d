#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cstdint>
#include <limits>

namespace mlg {

/// Optional runtime probes. When a model carries a non-null Instrumentation
/// pointer, attention layers record softmax row sums and the recurrent unit
/// records gate/hidden ranges. Tests use this to check normalization and
/// range invariants without changing any computation.
struct Instrumentation {
    double attn_row_sum_min = std::numeric_limits<double>::infinity();
    double attn_row_sum_max = -std::numeric_limits<double>::infinity();
    int64_t attn_rows = 0;

    double gate_min = std::numeric_limits<double>::infinity();
    double gate_max = -std::numeric_limits<double>::infinity();

    double hidden_min = std::numeric_limits<double>::infinity();
    double hidden_max = -std::numeric_limits<double>::infinity();

    double upsample_weight_sum_min = std::numeric_limits<double>::infinity();
    double upsample_weight_sum_max = -std::numeric_limits<double>::infinity();

    void note_attention(const torch::Tensor& weights) {
        // weights: [..., rows, cols] post-softmax
        auto sums = weights.detach().sum(-1);
        attn_row_sum_min = std::min(attn_row_sum_min, sums.min().item<double>());
        attn_row_sum_max = std::max(attn_row_sum_max, sums.max().item<double>());
        attn_rows += sums.numel();
    }

    void note_gate(const torch::Tensor& g) {
        gate_min = std::min(gate_min, g.detach().min().item<double>());
        gate_max = std::max(gate_max, g.detach().max().item<double>());
    }

    void note_hidden(const torch::Tensor& h) {
        hidden_min = std::min(hidden_min, h.detach().min().item<double>());
        hidden_max = std::max(hidden_max, h.detach().max().item<double>());
    }

    void note_upsample_weights(const torch::Tensor& w) {
        // w: [..., 9, ...] convex weights, already softmaxed along dim 2
        auto sums = w.detach().sum(2);
        upsample_weight_sum_min = std::min(upsample_weight_sum_min, sums.min().item<double>());
        upsample_weight_sum_max = std::max(upsample_weight_sum_max, sums.max().item<double>());
    }
};

}  // namespace mlg
