#include "mlg/lgcv.hpp"

#include <cmath>

#include "mlg/errors.hpp"
#include "mlg/nn_utils.hpp"

namespace mlg {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

void MatchingConfig::validate(int64_t feature_dim) const {
    TORCH_CHECK(groups >= 1, "MatchingConfig: groups must be >= 1");
    if (feature_dim % groups != 0) {
        throw GroupMismatch("MatchingConfig: feature dim " + std::to_string(feature_dim) +
                            " not divisible by groups " + std::to_string(groups));
    }
    TORCH_CHECK(latent_count >= 1, "MatchingConfig: latent_count must be >= 1");
    TORCH_CHECK(attention_blocks >= 1, "MatchingConfig: attention_blocks must be >= 1");
    TORCH_CHECK(latent_channels % attention_heads == 0,
                "MatchingConfig: latent_channels must be divisible by attention_heads");
}

CorrelationVolume build_gapc(const torch::Tensor& f_left, const torch::Tensor& f_right,
                             int64_t groups, int64_t max_disparity) {
    TORCH_CHECK(f_left.dim() == 4, "build_gapc: expected [B, C, H, W]");
    if (f_left.sizes() != f_right.sizes()) {
        throw ShapeMismatch("build_gapc: left/right feature dims differ");
    }
    const int64_t c = f_left.size(1);
    if (c % groups != 0) {
        throw GroupMismatch("build_gapc: channel count " + std::to_string(c) +
                            " not divisible by groups " + std::to_string(groups));
    }
    const int64_t b = f_left.size(0);
    const int64_t h = f_left.size(2);
    const int64_t w = f_left.size(3);
    const int64_t d = max_disparity > 0 ? std::min(max_disparity, w) : w;

    auto fl = f_left.reshape({b, groups, c / groups, h, w});
    auto fr = f_right.reshape({b, groups, c / groups, h, w});
    std::vector<torch::Tensor> slices;
    slices.reserve(d);
    for (int64_t z = 0; z < d; ++z) {
        auto prod = (fl.index({Slice(), Slice(), Slice(), Slice(), Slice(z, w)}) *
                     fr.index({Slice(), Slice(), Slice(), Slice(), Slice(0, w - z)}))
                        .sum(2);  // [B, G, H, W - z]
        if (z > 0) {
            prod = F::pad(prod, F::PadFuncOptions({z, 0}));
        }
        slices.push_back(prod);
    }
    CorrelationVolume vol;
    vol.values = torch::stack(slices, 2);  // [B, G, D, H, W]
    vol.groups = groups;
    vol.max_disparity = d;
    return vol;
}

// ---------------------------------------------------------------------------
// Local regularization

HourglassRegularizerImpl::HourglassRegularizerImpl(int64_t groups, int64_t channels,
                                                   int64_t feature_dim)
    : channels_(channels) {
    auto c3 = [](int64_t in, int64_t out, int64_t stride) {
        return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).stride(stride).padding(1));
    };
    conv_in1_ = register_module("conv_in1", c3(groups, channels, 1));
    conv_in2_ = register_module("conv_in2", c3(channels, channels, 1));
    down1_ = register_module("down1", c3(channels, 2 * channels, 2));
    down2_ = register_module("down2", c3(2 * channels, 4 * channels, 2));
    mid_ = register_module("mid", c3(4 * channels, 4 * channels, 1));
    up1_ = register_module("up1", torch::nn::ConvTranspose3d(
                                      torch::nn::ConvTranspose3dOptions(4 * channels,
                                                                        2 * channels, 4)
                                          .stride(2)
                                          .padding(1)));
    up2_ = register_module("up2", torch::nn::ConvTranspose3d(
                                      torch::nn::ConvTranspose3dOptions(2 * channels, channels, 4)
                                          .stride(2)
                                          .padding(1)));
    excite1_ = register_module("excite1", torch::nn::Conv2d(feature_dim, 2 * channels, 1));
    excite2_ = register_module("excite2", torch::nn::Conv2d(feature_dim, 4 * channels, 1));
    pool_mix_ = register_module(
        "pool_mix", torch::nn::Conv3d(torch::nn::Conv3dOptions(3 * channels, channels, 1)));
    conv_out_ = register_module("conv_out", c3(channels, channels, 1));
}

LocalCostVolume HourglassRegularizerImpl::forward(const CorrelationVolume& gapc,
                                                  const FeaturePyramid& guide) {
    auto x = gapc.values;
    TORCH_CHECK(x.size(3) == guide.levels[0].size(2) && x.size(4) == guide.levels[0].size(3),
                "regularize_lcv: volume spatial dims must match pyramid level 1");
    const int64_t d = x.size(2);
    TORCH_CHECK(d % 4 == 0 && x.size(3) % 4 == 0 && x.size(4) % 4 == 0,
                "regularize_lcv: (D, H/4, W/4) must be divisible by 4");

    auto v0 = torch::gelu(conv_in2_(torch::gelu(conv_in1_(x))));
    // Guided excitation at the matching pyramid scales, broadcast over disparity.
    auto v1 = torch::gelu(down1_(v0)) *
              torch::sigmoid(excite1_(guide.levels[1])).unsqueeze(2);
    auto v2 = torch::gelu(down2_(v1)) *
              torch::sigmoid(excite2_(guide.levels[2])).unsqueeze(2);
    v2 = torch::gelu(mid_(v2));
    auto u1 = torch::gelu(up1_(v2) + v1);
    auto u0 = torch::gelu(up2_(u1) + v0);

    // Disparity-axis pooling: global and quarter-resolution context along z.
    auto pg = u0.mean(2, /*keepdim=*/true).expand_as(u0);
    auto p4 = F::adaptive_avg_pool3d(
        u0, F::AdaptiveAvgPool3dFuncOptions({std::max<int64_t>(d / 4, 1), u0.size(3),
                                             u0.size(4)}));
    p4 = F::interpolate(p4, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{d, u0.size(3), u0.size(4)})
                                .mode(torch::kTrilinear)
                                .align_corners(false));
    auto mixed = torch::gelu(pool_mix_(torch::cat({u0, pg, p4}, 1)));

    LocalCostVolume out;
    out.values = conv_out_(mixed);
    out.channels = channels_;
    return out;
}

InitDisparityRegressorImpl::InitDisparityRegressorImpl(int64_t channels) {
    score_ = register_module("score",
                             torch::nn::Conv3d(torch::nn::Conv3dOptions(channels, 1, 1)));
}

torch::Tensor InitDisparityRegressorImpl::forward(const LocalCostVolume& lcv) {
    auto scores = score_(lcv.values).squeeze(1);            // [B, D, H, W]
    auto prob = torch::softmax(scores, 1);
    auto zs = torch::arange(lcv.values.size(2), prob.options()).reshape({1, -1, 1, 1});
    return (prob * zs).sum(1, /*keepdim=*/true);            // [B, 1, H, W]
}

// ---------------------------------------------------------------------------
// Latent compression

LatentCompressorImpl::LatentCompressorImpl(int64_t groups, int64_t latent_count, int64_t channels)
    : latent_count_(latent_count), channels_(channels) {
    token_embed_ = register_module("token_embed", torch::nn::Linear(groups, channels));
    wq_ = register_module("wq", torch::nn::Linear(channels, channels));
    wk_ = register_module("wk", torch::nn::Linear(channels, channels));
    wv_ = register_module("wv", torch::nn::Linear(channels, channels));
    latents_ = register_parameter("latents", torch::empty({latent_count, channels}));
    trunc_normal_(latents_, 0.02);
}

LatentCostSequence LatentCompressorImpl::forward(const CorrelationVolume& gapc,
                                                 Instrumentation* instr) {
    auto v = gapc.values;  // [B, G, D, H, W]
    const int64_t b = v.size(0);
    const int64_t d = v.size(2);
    const int64_t h = v.size(3);
    const int64_t w = v.size(4);

    // Per-pixel sequences of D correlation tokens, embedded and position-encoded.
    auto tokens = v.permute({0, 3, 4, 2, 1}).reshape({b, h * w, d, gapc.groups});
    auto x = token_embed_(tokens) +
             sinusoidal_position_encoding_1d(d, channels_, v.options()).unsqueeze(0).unsqueeze(0);

    // Single-head cross-attention, queries from the learned latent bank.
    auto q = wq_(latents_);                                    // [L, C]
    auto k = wk_(x);                                           // [B, HW, D, C]
    auto val = wv_(x);
    auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(double(channels_));
    auto attn = torch::softmax(scores, -1);                    // [B, HW, L, D]
    if (instr) {
        instr->note_attention(attn);
    }
    LatentCostSequence s;
    s.tokens = torch::matmul(attn, val);                       // [B, HW, L, C]
    s.latent_count = latent_count_;
    s.channels = channels_;
    s.h = h;
    s.w = w;
    return s;
}

// ---------------------------------------------------------------------------
// Bidirectional attention

BidirectionalBlockImpl::BidirectionalBlockImpl(int64_t channels, int64_t feature_dim,
                                               int64_t heads, int64_t lsa_window,
                                               int64_t gsa_subsample)
    : heads_(heads), lsa_window_(lsa_window), gsa_subsample_(gsa_subsample) {
    auto ln = [&](int64_t dim) {
        return torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}));
    };
    ln_disp_ = register_module("ln_disp", ln(channels));
    ln_disp_ffn_ = register_module("ln_disp_ffn", ln(channels));
    ln_lsa_ = register_module("ln_lsa", ln(channels));
    ln_lsa_ffn_ = register_module("ln_lsa_ffn", ln(channels));
    ln_gsa_ = register_module("ln_gsa", ln(channels));
    ln_gsa_ffn_ = register_module("ln_gsa_ffn", ln(channels));

    qkv_disp_ = register_module("qkv_disp", torch::nn::Linear(channels, 3 * channels));
    proj_disp_ = register_module("proj_disp", torch::nn::Linear(channels, channels));

    const int64_t cat_dim = channels + feature_dim;
    lsa_q_ = register_module("lsa_q", torch::nn::Linear(cat_dim, channels));
    lsa_kv_ = register_module("lsa_kv", torch::nn::Linear(cat_dim, 2 * channels));
    lsa_proj_ = register_module("lsa_proj", torch::nn::Linear(channels, channels));
    gsa_q_ = register_module("gsa_q", torch::nn::Linear(cat_dim, channels));
    gsa_kv_ = register_module("gsa_kv", torch::nn::Linear(cat_dim, 2 * channels));
    gsa_proj_ = register_module("gsa_proj", torch::nn::Linear(channels, channels));

    ffns_ = register_module("ffns", torch::nn::ModuleList());
    for (int i = 0; i < 3; ++i) {
        ffns_->push_back(torch::nn::Sequential(torch::nn::Linear(channels, 2 * channels),
                                               torch::nn::GELU(),
                                               torch::nn::Linear(2 * channels, channels)));
    }
}

torch::Tensor BidirectionalBlockImpl::ffn(int idx, const torch::Tensor& x) {
    return ffns_[idx]->as<torch::nn::SequentialImpl>()->forward(x);
}

LatentCostSequence BidirectionalBlockImpl::forward(const LatentCostSequence& s,
                                                   const torch::Tensor& f_left,
                                                   Instrumentation* instr) {
    const int64_t b = s.tokens.size(0);
    const int64_t hw = s.tokens.size(1);
    const int64_t l = s.latent_count;
    const int64_t c = s.channels;
    const int64_t h = s.h;
    const int64_t w = s.w;
    if (f_left.size(2) != h || f_left.size(3) != w) {
        throw ScaleMismatch("bidirectional_block: latent sequence and feature extents differ");
    }
    if (h % lsa_window_ != 0 || w % lsa_window_ != 0 || h % gsa_subsample_ != 0 ||
        w % gsa_subsample_ != 0) {
        throw ScaleMismatch("bidirectional_block: spatial dims not divisible by window/subsample");
    }
    const int64_t e = f_left.size(1);

    // (a) Disparity direction: per-pixel self-attention among the L tokens.
    auto x = s.tokens.reshape({b * hw, l, c});
    auto qkv = qkv_disp_(ln_disp_(x)).chunk(3, -1);
    x = x + proj_disp_(sdp_attention(qkv[0], qkv[1], qkv[2], heads_, instr));
    x = x + ffn(0, ln_disp_ffn_(x));

    // (b) Spatial direction: L maps of H*W tokens with features concatenated.
    auto y = x.reshape({b, hw, l, c}).permute({0, 2, 1, 3}).reshape({b * l, hw, c});
    auto f_tok = f_left.flatten(2).transpose(1, 2);  // [B, HW, e]
    auto f_exp = f_tok.unsqueeze(1).expand({b, l, hw, e}).reshape({b * l, hw, e});

    // Locally-grouped self-attention over lsa_window x lsa_window windows.
    {
        auto a = torch::cat({ln_lsa_(y), f_exp}, -1);  // [B*L, HW, C+e]
        const int64_t wn = lsa_window_;
        const int64_t nh = h / wn;
        const int64_t nw = w / wn;
        auto windows = a.reshape({b * l, nh, wn, nw, wn, c + e})
                           .permute({0, 1, 3, 2, 4, 5})
                           .reshape({b * l * nh * nw, wn * wn, c + e});
        auto q = lsa_q_(windows);
        auto kv = lsa_kv_(windows).chunk(2, -1);
        auto attn = sdp_attention(q, kv[0], kv[1], heads_, instr);  // [.., wn*wn, C]
        auto un = attn.reshape({b * l, nh, nw, wn, wn, c})
                      .permute({0, 1, 3, 2, 4, 5})
                      .reshape({b * l, hw, c});
        y = y + lsa_proj_(un);
        y = y + ffn(1, ln_lsa_ffn_(y));
    }

    // Global sub-sample attention: keys/values from a pooled token grid.
    {
        auto a = torch::cat({ln_gsa_(y), f_exp}, -1);
        auto amap = a.transpose(1, 2).reshape({b * l, c + e, h, w});
        auto pooled = F::avg_pool2d(amap, F::AvgPool2dFuncOptions(gsa_subsample_));
        auto pooled_tok = pooled.flatten(2).transpose(1, 2);  // [B*L, HW/s^2, C+e]
        auto q = gsa_q_(a);
        auto kv = gsa_kv_(pooled_tok).chunk(2, -1);
        auto attn = sdp_attention(q, kv[0], kv[1], heads_, instr);
        y = y + gsa_proj_(attn);
        y = y + ffn(2, ln_gsa_ffn_(y));
    }

    LatentCostSequence out = s;
    out.tokens = y.reshape({b, l, hw, c}).permute({0, 2, 1, 3});
    return out;
}

GlobalCostVolume build_gcv(const LatentCostSequence& s_final, const LatentCostSequence& s0) {
    if (s_final.tokens.sizes() != s0.tokens.sizes()) {
        throw ShapeMismatch("build_gcv: sequence shapes differ");
    }
    auto sum = s_final.tokens + s0.tokens;  // [B, HW, L, C]
    GlobalCostVolume gcv;
    gcv.values = sum.permute({0, 3, 2, 1})
                     .reshape({sum.size(0), s0.channels, s0.latent_count, s0.h, s0.w});
    return gcv;
}

// ---------------------------------------------------------------------------
// Composite matcher

LgcvMatcherImpl::LgcvMatcherImpl(const MatchingConfig& cfg, int64_t feature_dim,
                                 bool build_global)
    : cfg_(cfg), build_global_(build_global) {
    cfg_.validate(feature_dim);
    hourglass_ = register_module(
        "hourglass", HourglassRegularizer(cfg_.groups, cfg_.latent_channels, feature_dim));
    init_regressor_ =
        register_module("init_regressor", InitDisparityRegressor(cfg_.latent_channels));
    if (build_global_) {
        compressor_ = register_module(
            "compressor",
            LatentCompressor(cfg_.groups, cfg_.latent_count, cfg_.latent_channels));
        blocks_ = register_module("blocks", torch::nn::ModuleList());
        for (int64_t i = 0; i < cfg_.attention_blocks; ++i) {
            blocks_->push_back(BidirectionalBlock(cfg_.latent_channels, feature_dim,
                                                  cfg_.attention_heads, cfg_.lsa_window,
                                                  cfg_.gsa_subsample));
        }
    }
}

MatchOutputs LgcvMatcherImpl::forward(const torch::Tensor& f_left, const torch::Tensor& f_right,
                                      const FeaturePyramid& guide, Instrumentation* instr) {
    MatchOutputs out;
    out.gapc = build_gapc(f_left, f_right, cfg_.groups, cfg_.max_disparity);
    out.lcv = hourglass_->forward(out.gapc, guide);
    out.init_disparity = init_regressor_->forward(out.lcv);
    if (build_global_) {
        auto s0 = compressor_->forward(out.gapc, instr);
        auto s = s0;
        for (auto& block : *blocks_) {
            s = block->as<BidirectionalBlockImpl>()->forward(s, f_left, instr);
        }
        out.gcv = build_gcv(s, s0);
        out.has_gcv = true;
    }
    return out;
}

}  // namespace mlg
