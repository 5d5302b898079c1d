#include "mlg/lgru.hpp"

#include <cmath>

#include "mlg/errors.hpp"
#include "mlg/nn_utils.hpp"

namespace mlg {

namespace F = torch::nn::functional;

void DecoderConfig::validate() const {
    TORCH_CHECK(lookup_radius >= 0, "DecoderConfig: lookup_radius must be >= 0");
    TORCH_CHECK(iterations >= 1, "DecoderConfig: iterations must be >= 1");
    TORCH_CHECK(small_kernel % 2 == 1 && large_kernel % 2 == 1,
                "DecoderConfig: kernels must be odd");
    TORCH_CHECK(small_kernel < large_kernel,
                "DecoderConfig: small_kernel must be smaller than large_kernel");
    TORCH_CHECK(upsample_factor == 4, "DecoderConfig: upsample factor is fixed at 4");
}

torch::Tensor lookup_lcv(const LocalCostVolume& lcv, const torch::Tensor& disparity,
                         int64_t radius) {
    TORCH_CHECK(radius >= 0, "lookup_lcv: radius must be >= 0");
    auto vol = lcv.values;  // [B, C, D, H, W]
    TORCH_CHECK(vol.dim() == 5, "lookup_lcv: volume must be [B, C, D, H, W]");
    TORCH_CHECK(disparity.dim() == 4 && disparity.size(1) == 1,
                "lookup_lcv: disparity must be [B, 1, H, W]");
    TORCH_CHECK(disparity.size(2) == vol.size(3) && disparity.size(3) == vol.size(4),
                "lookup_lcv: disparity and volume spatial dims differ");
    const int64_t b = vol.size(0);
    const int64_t c = vol.size(1);
    const int64_t d = vol.size(2);
    const int64_t h = vol.size(3);
    const int64_t w = vol.size(4);
    const int64_t r = 2 * radius + 1;

    auto offsets = torch::arange(-radius, radius + 1, disparity.options()).reshape({1, r, 1, 1});
    auto z = (disparity + offsets).clamp(0, double(d - 1));  // [B, R, H, W]
    auto z0 = z.floor();
    auto frac = (z - z0).unsqueeze(1);  // [B, 1, R, H, W]
    auto i0 = z0.to(torch::kLong).unsqueeze(1).expand({b, c, r, h, w});
    auto i1 = (z0 + 1).clamp(0, double(d - 1)).to(torch::kLong).unsqueeze(1).expand({b, c, r, h, w});
    auto vexp = vol.unsqueeze(2).expand({b, c, r, d, h, w});
    auto g0 = vexp.gather(3, i0.unsqueeze(3)).squeeze(3);
    auto g1 = vexp.gather(3, i1.unsqueeze(3)).squeeze(3);
    return g0 * (1.0 - frac) + g1 * frac;  // [B, C, R, H, W]
}

// ---------------------------------------------------------------------------

GlobalGuidanceImpl::GlobalGuidanceImpl(int64_t channels) : channels_(channels) {
    wq_ = register_module("wq", torch::nn::Linear(channels, channels));
    wk_ = register_module("wk", torch::nn::Linear(channels, channels));
    wv_ = register_module("wv", torch::nn::Linear(channels, channels));
    ffn1_ = register_module("ffn1", torch::nn::Linear(channels, 2 * channels));
    ffn2_ = register_module("ffn2", torch::nn::Linear(2 * channels, channels));
}

torch::Tensor GlobalGuidanceImpl::forward(const torch::Tensor& lookup_tokens,
                                          const GlobalCostVolume& gcv, Instrumentation* instr) {
    // lookup_tokens: [B, C, R, H, W]; gcv.values: [B, C, L, H, W]
    if (lookup_tokens.size(3) != gcv.values.size(3) ||
        lookup_tokens.size(4) != gcv.values.size(4) ||
        lookup_tokens.size(0) != gcv.values.size(0)) {
        throw ShapeMismatch("global_guidance: lookup and global volume dims differ");
    }
    const int64_t b = lookup_tokens.size(0);
    const int64_t c = lookup_tokens.size(1);
    const int64_t r = lookup_tokens.size(2);
    const int64_t h = lookup_tokens.size(3);
    const int64_t w = lookup_tokens.size(4);
    const int64_t l = gcv.values.size(2);

    auto q_tok = lookup_tokens.permute({0, 3, 4, 2, 1}).reshape({b * h * w, r, c});
    auto g_tok = gcv.values.permute({0, 3, 4, 2, 1}).reshape({b * h * w, l, c});

    auto scores = torch::matmul(wq_(q_tok), wk_(g_tok).transpose(-2, -1)) /
                  std::sqrt(double(channels_));
    auto attn = torch::softmax(scores, -1);  // [BHW, R, L]
    if (instr) {
        instr->note_attention(attn);
    }
    auto gathered = torch::matmul(attn, wv_(g_tok));              // [BHW, R, C]
    auto enhanced = q_tok + ffn2_(torch::gelu(ffn1_(gathered)));  // residual onto L_k
    return enhanced.reshape({b, h, w, r, c}).permute({0, 4, 3, 1, 2});
}

MotionEncoderImpl::MotionEncoderImpl(int64_t in_channels, int64_t out_channels) {
    conv1_ = register_module("conv1",
                             torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, 128, 1)));
    conv2_ = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(128, out_channels, 3).padding(1)));
}

torch::Tensor MotionEncoderImpl::forward(const torch::Tensor& x) {
    return torch::gelu(conv2_(torch::gelu(conv1_(x))));
}

// ---------------------------------------------------------------------------

SelectiveGruCellImpl::SelectiveGruCellImpl(int64_t hidden, int64_t input_channels,
                                           int64_t context_dim, int64_t small_kernel,
                                           int64_t large_kernel) {
    auto conv = [&](int64_t k) {
        return torch::nn::Conv2d(
            torch::nn::Conv2dOptions(hidden + input_channels, hidden, k).padding(k / 2));
    };
    convz_s_ = register_module("convz_s", conv(small_kernel));
    convr_s_ = register_module("convr_s", conv(small_kernel));
    convh_s_ = register_module("convh_s", conv(small_kernel));
    convz_l_ = register_module("convz_l", conv(large_kernel));
    convr_l_ = register_module("convr_l", conv(large_kernel));
    convh_l_ = register_module("convh_l", conv(large_kernel));
    conv_att_ = register_module(
        "conv_att", torch::nn::Conv2d(torch::nn::Conv2dOptions(context_dim, hidden, 3).padding(1)));
}

torch::Tensor SelectiveGruCellImpl::forward(const torch::Tensor& h, const torch::Tensor& x,
                                            const ContextPyramid::GateInputs& gates,
                                            const torch::Tensor& ctx, Instrumentation* instr) {
    auto hx = torch::cat({h, x}, 1);

    auto z_s = torch::sigmoid(convz_s_(hx) + gates.z);
    auto r_s = torch::sigmoid(convr_s_(hx) + gates.r);
    auto ht_s = torch::tanh(convh_s_(torch::cat({r_s * h, x}, 1)) + gates.h);
    auto h_s = (1.0 - z_s) * h + z_s * ht_s;

    auto z_l = torch::sigmoid(convz_l_(hx) + gates.z);
    auto r_l = torch::sigmoid(convr_l_(hx) + gates.r);
    auto ht_l = torch::tanh(convh_l_(torch::cat({r_l * h, x}, 1)) + gates.h);
    auto h_l = (1.0 - z_l) * h + z_l * ht_l;

    auto att = torch::sigmoid(conv_att_(ctx));
    auto out = att * h_s + (1.0 - att) * h_l;
    if (instr) {
        instr->note_gate(z_s);
        instr->note_gate(z_l);
        instr->note_gate(r_s);
        instr->note_gate(r_l);
        instr->note_gate(att);
        instr->note_hidden(out);
    }
    return out;
}

MultiLevelUpdateImpl::MultiLevelUpdateImpl(int64_t hidden, int64_t motion_channels,
                                           int64_t context_dim, int64_t small_kernel,
                                           int64_t large_kernel) {
    cell1_ = register_module("cell1", SelectiveGruCell(hidden, motion_channels + hidden,
                                                       context_dim, small_kernel, large_kernel));
    cell2_ = register_module(
        "cell2", SelectiveGruCell(hidden, 2 * hidden, context_dim, small_kernel, large_kernel));
    cell3_ = register_module(
        "cell3", SelectiveGruCell(hidden, hidden, context_dim, small_kernel, large_kernel));
}

std::array<torch::Tensor, 3> MultiLevelUpdateImpl::forward(
    const std::array<torch::Tensor, 3>& hidden, const torch::Tensor& motion,
    const ContextPyramid& ctx, Instrumentation* instr) {
    auto down = [](const torch::Tensor& t) {
        return F::avg_pool2d(t, F::AvgPool2dFuncOptions(2));
    };
    auto up = [](const torch::Tensor& t) {
        return F::interpolate(
            t, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0})
                   .mode(torch::kBilinear)
                   .align_corners(false));
    };
    auto h3 = cell3_->forward(hidden[2], down(hidden[1]), ctx.gate_inputs[2], ctx.levels[2], instr);
    auto h2 = cell2_->forward(hidden[1], torch::cat({down(hidden[0]), up(h3)}, 1),
                              ctx.gate_inputs[1], ctx.levels[1], instr);
    auto h1 = cell1_->forward(hidden[0], torch::cat({motion, up(h2)}, 1), ctx.gate_inputs[0],
                              ctx.levels[0], instr);
    return {h1, h2, h3};
}

// ---------------------------------------------------------------------------

ConvexUpsamplerImpl::ConvexUpsamplerImpl(int64_t hidden, int64_t factor) : factor_(factor) {
    conv1_ = register_module(
        "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, hidden, 3).padding(1)));
    conv2_ = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, 9 * factor * factor, 1)));
}

torch::Tensor ConvexUpsamplerImpl::forward(const torch::Tensor& disparity,
                                           const torch::Tensor& hidden, Instrumentation* instr) {
    const int64_t b = disparity.size(0);
    const int64_t h = disparity.size(2);
    const int64_t w = disparity.size(3);
    const int64_t f = factor_;

    auto mask = conv2_(torch::gelu(conv1_(hidden))).reshape({b, 1, 9, f, f, h, w});
    mask = torch::softmax(mask, 2);
    if (instr) {
        instr->note_upsample_weights(mask);
    }
    auto neighbors = F::unfold(disparity, F::UnfoldFuncOptions(3).padding(1))
                         .reshape({b, 1, 9, 1, 1, h, w});
    auto up = (mask * neighbors).sum(2);                       // [B, 1, f, f, h, w]
    up = up.permute({0, 1, 4, 2, 5, 3}).reshape({b, 1, f * h, f * w});
    return up * double(f);  // quarter-resolution pixels -> full-resolution pixels
}

// ---------------------------------------------------------------------------

LgruDecoderImpl::LgruDecoderImpl(const DecoderConfig& cfg, int64_t volume_channels,
                                 int64_t latent_count, int64_t context_dim, GuidanceMode mode)
    : cfg_(cfg), mode_(mode), volume_channels_(volume_channels) {
    cfg_.validate();
    const int64_t r = 2 * cfg_.lookup_radius + 1;
    int64_t motion_in = volume_channels * r + 1;  // L_k stack + current disparity
    if (mode_ == GuidanceMode::cross_attention) {
        guidance_ = register_module("guidance", GlobalGuidance(volume_channels));
        motion_in += volume_channels * r;  // E_k stack
    } else if (mode_ == GuidanceMode::concat) {
        motion_in += volume_channels * latent_count;  // flattened GCV tokens
    }
    motion_ = register_module("motion", MotionEncoder(motion_in, cfg_.motion_channels));
    update_ = register_module(
        "update", MultiLevelUpdate(cfg_.hidden_channels, cfg_.motion_channels, context_dim,
                                   cfg_.small_kernel, cfg_.large_kernel));
    hidden_init_ = register_module("hidden_init", torch::nn::ModuleList());
    for (int i = 0; i < 3; ++i) {
        hidden_init_->push_back(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(context_dim, cfg_.hidden_channels, 1)));
    }
    head1_ = register_module("head1",
                             torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.hidden_channels,
                                                                        cfg_.hidden_channels, 3)
                                                   .padding(1)));
    head2_ = register_module(
        "head2",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.hidden_channels, 1, 3).padding(1)));
    upsampler_ = register_module("upsampler",
                                 ConvexUpsampler(cfg_.hidden_channels, cfg_.upsample_factor));
}

DecodeResult LgruDecoderImpl::run_iterations(const LocalCostVolume& lcv,
                                             const GlobalCostVolume& gcv,
                                             const torch::Tensor& init_disparity,
                                             const ContextPyramid& ctx, int64_t iterations,
                                             Instrumentation* instr) {
    TORCH_CHECK(iterations >= 1, "run_iterations: need at least one iteration");
    TORCH_CHECK(mode_ == GuidanceMode::none || gcv.values.defined(),
                "run_iterations: guidance mode requires a global cost volume");

    std::array<torch::Tensor, 3> hidden;
    for (int i = 0; i < 3; ++i) {
        hidden[i] = torch::tanh(
            hidden_init_[i]->as<torch::nn::Conv2dImpl>()->forward(ctx.levels[i]));
    }

    const int64_t b = init_disparity.size(0);
    const int64_t h = init_disparity.size(2);
    const int64_t w = init_disparity.size(3);
    torch::Tensor gcv_flat;
    if (mode_ == GuidanceMode::concat) {
        gcv_flat = gcv.values.reshape({b, -1, h, w});
    }

    DecodeResult result;
    auto d = init_disparity;
    for (int64_t k = 0; k < iterations; ++k) {
        auto lk = lookup_lcv(lcv, d, cfg_.lookup_radius);
        torch::Tensor motion_in;
        if (mode_ == GuidanceMode::cross_attention) {
            auto ek = guidance_->forward(lk, gcv, instr);
            motion_in = torch::cat({ek.reshape({b, -1, h, w}), lk.reshape({b, -1, h, w}), d}, 1);
        } else if (mode_ == GuidanceMode::concat) {
            motion_in = torch::cat({lk.reshape({b, -1, h, w}), gcv_flat, d}, 1);
        } else {
            motion_in = torch::cat({lk.reshape({b, -1, h, w}), d}, 1);
        }
        auto m = motion_->forward(motion_in);
        hidden = update_->forward(hidden, m, ctx, instr);
        auto delta = head2_(torch::gelu(head1_(hidden[0])));
        d = torch::clamp(d + delta, 0.0);
        result.disparities_full.push_back(upsampler_->forward(d, hidden[0], instr));
    }
    result.final_quarter = d;
    return result;
}

}  // namespace mlg
