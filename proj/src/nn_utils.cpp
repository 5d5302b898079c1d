#include "mlg/nn_utils.hpp"

#include <cmath>

namespace mlg {

torch::Tensor sdp_attention(const torch::Tensor& q, const torch::Tensor& k,
                            const torch::Tensor& v, int64_t heads,
                            Instrumentation* instr) {
    const int64_t b = q.size(0);
    const int64_t nq = q.size(1);
    const int64_t nk = k.size(1);
    const int64_t c = q.size(2);
    TORCH_CHECK(c % heads == 0, "attention dim not divisible by head count");
    const int64_t hd = c / heads;

    auto split = [&](const torch::Tensor& t, int64_t n) {
        return t.reshape({b, n, heads, hd}).permute({0, 2, 1, 3});
    };
    auto qh = split(q, nq);
    auto kh = split(k, nk);
    auto vh = split(v, nk);

    auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(double(hd));
    auto attn = torch::softmax(scores, -1);
    if (instr) {
        instr->note_attention(attn);
    }
    auto out = torch::matmul(attn, vh);  // [B, heads, nq, hd]
    return out.permute({0, 2, 1, 3}).reshape({b, nq, c});
}

torch::Tensor sinusoidal_position_encoding_1d(int64_t n, int64_t dim,
                                              const torch::TensorOptions& opts) {
    TORCH_CHECK(dim % 2 == 0, "1d position encoding needs even dim");
    auto pos = torch::arange(n, opts).unsqueeze(1);                       // [n, 1]
    auto idx = torch::arange(dim / 2, opts);                              // [dim/2]
    auto freq = torch::exp(idx * (-std::log(10000.0) / double(dim / 2))); // [dim/2]
    auto angles = pos * freq.unsqueeze(0);                                // [n, dim/2]
    return torch::cat({torch::sin(angles), torch::cos(angles)}, 1);      // [n, dim]
}

torch::Tensor sinusoidal_position_encoding_2d(int64_t h, int64_t w, int64_t dim,
                                              const torch::TensorOptions& opts) {
    TORCH_CHECK(dim % 4 == 0, "2d position encoding needs dim divisible by 4");
    auto row = sinusoidal_position_encoding_1d(h, dim / 2, opts);  // [h, dim/2]
    auto col = sinusoidal_position_encoding_1d(w, dim / 2, opts);  // [w, dim/2]
    auto row_grid = row.unsqueeze(1).expand({h, w, dim / 2});
    auto col_grid = col.unsqueeze(0).expand({h, w, dim / 2});
    return torch::cat({row_grid, col_grid}, 2).reshape({h * w, dim});
}

void trunc_normal_(torch::Tensor& t, double std_dev, double mean) {
    torch::NoGradGuard guard;
    const double a = mean - 2.0 * std_dev;
    const double b = mean + 2.0 * std_dev;
    auto cdf = [](double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); };
    const double lo = 2.0 * cdf((a - mean) / std_dev) - 1.0;
    const double hi = 2.0 * cdf((b - mean) / std_dev) - 1.0;
    t.uniform_(lo, hi);
    t.erfinv_();
    t.mul_(std_dev * std::sqrt(2.0)).add_(mean);
    t.clamp_(a, b);
}

}  // namespace mlg
