#pragma once

#include <torch/torch.h>

#include <cstdint>

#include "mlg/core_types.hpp"
#include "mlg/instrumentation.hpp"

namespace mlg {

struct MatchingConfig {
    int64_t groups = 8;
    int64_t latent_count = 16;    // L
    int64_t latent_channels = 32; // C
    int64_t attention_blocks = 3;
    int64_t attention_heads = 4;
    int64_t lsa_window = 4;
    int64_t gsa_subsample = 2;
    int64_t max_disparity = 0;  // 0 = W/4 at runtime

    void validate(int64_t feature_dim) const;
};

/// Grouped all-pairs correlation of 1/4-resolution feature pairs:
/// Corr(g, z, y, x) = <f_l^g(y, x), f_r^g(y, x - z)>, zero where x - z < 0.
/// values: [B, G, D, H/4, W/4]. Throws GroupMismatch.
CorrelationVolume build_gapc(const torch::Tensor& f_left, const torch::Tensor& f_right,
                             int64_t groups, int64_t max_disparity = 0);

/// 3-d hourglass over (D, H, W) with two downsampling stages, skip
/// connections, feature-guided excitation at the matching pyramid scales and
/// disparity-axis pooling. Produces the locally regularized cost volume.
class HourglassRegularizerImpl : public torch::nn::Module {
public:
    HourglassRegularizerImpl(int64_t groups, int64_t channels, int64_t feature_dim);
    LocalCostVolume forward(const CorrelationVolume& gapc, const FeaturePyramid& guide);

private:
    torch::nn::Conv3d conv_in1_{nullptr}, conv_in2_{nullptr}, down1_{nullptr}, down2_{nullptr},
        mid_{nullptr}, pool_mix_{nullptr}, conv_out_{nullptr};
    torch::nn::ConvTranspose3d up1_{nullptr}, up2_{nullptr};
    torch::nn::Conv2d excite1_{nullptr}, excite2_{nullptr};
    int64_t channels_;
};
TORCH_MODULE(HourglassRegularizer);

/// Soft-argmin disparity regression: 1x1x1 score projection, softmax over
/// the disparity axis (scores as affinities), expectation sum(z * p).
class InitDisparityRegressorImpl : public torch::nn::Module {
public:
    explicit InitDisparityRegressorImpl(int64_t channels);
    torch::Tensor forward(const LocalCostVolume& lcv);  // [B, 1, H/4, W/4]

private:
    torch::nn::Conv3d score_{nullptr};
};
TORCH_MODULE(InitDisparityRegressor);

/// Perceiver-style compression of the per-pixel disparity token sequence to
/// a fixed number of latent tokens via single-head cross-attention. The
/// disparity axis carries a fixed sinusoidal position encoding.
class LatentCompressorImpl : public torch::nn::Module {
public:
    LatentCompressorImpl(int64_t groups, int64_t latent_count, int64_t channels);
    LatentCostSequence forward(const CorrelationVolume& gapc, Instrumentation* instr = nullptr);

    torch::Tensor latent_bank() const { return latents_; }

private:
    torch::nn::Linear token_embed_{nullptr}, wq_{nullptr}, wk_{nullptr}, wv_{nullptr};
    torch::Tensor latents_;  // [L, C]
    int64_t latent_count_, channels_;
};
TORCH_MODULE(LatentCompressor);

/// One bidirectional attention block: (a) self-attention + FFN among the L
/// latent tokens of each pixel (disparity direction), then (b) windowed LSA
/// and subsampled GSA over the spatial token grid with the left image
/// features concatenated along channels, each followed by an FFN. Residual
/// connections wrap every attention and FFN.
class BidirectionalBlockImpl : public torch::nn::Module {
public:
    BidirectionalBlockImpl(int64_t channels, int64_t feature_dim, int64_t heads,
                           int64_t lsa_window, int64_t gsa_subsample);
    LatentCostSequence forward(const LatentCostSequence& s, const torch::Tensor& f_left,
                               Instrumentation* instr = nullptr);

private:
    torch::Tensor ffn(int idx, const torch::Tensor& x);

    torch::nn::LayerNorm ln_disp_{nullptr}, ln_disp_ffn_{nullptr}, ln_lsa_{nullptr},
        ln_lsa_ffn_{nullptr}, ln_gsa_{nullptr}, ln_gsa_ffn_{nullptr};
    torch::nn::Linear qkv_disp_{nullptr}, proj_disp_{nullptr};
    torch::nn::Linear lsa_q_{nullptr}, lsa_kv_{nullptr}, lsa_proj_{nullptr};
    torch::nn::Linear gsa_q_{nullptr}, gsa_kv_{nullptr}, gsa_proj_{nullptr};
    torch::nn::ModuleList ffns_;
    int64_t heads_, lsa_window_, gsa_subsample_;
};
TORCH_MODULE(BidirectionalBlock);

/// Element-wise skip fusion of the attended sequence with the original
/// latent sequence, reshaped to [B, C, L, H/4, W/4]. Throws ShapeMismatch.
GlobalCostVolume build_gcv(const LatentCostSequence& s_final, const LatentCostSequence& s0);

struct MatchOutputs {
    CorrelationVolume gapc;
    LocalCostVolume lcv;
    torch::Tensor init_disparity;  // [B, 1, H/4, W/4]
    GlobalCostVolume gcv;          // values undefined when global path disabled
    bool has_gcv = false;
};

/// The full matching block: GAPC, local regularization, initial disparity
/// regression, and (unless disabled for ablation) latent compression,
/// bidirectional attention and GCV emission.
class LgcvMatcherImpl : public torch::nn::Module {
public:
    LgcvMatcherImpl(const MatchingConfig& cfg, int64_t feature_dim, bool build_global);
    MatchOutputs forward(const torch::Tensor& f_left, const torch::Tensor& f_right,
                         const FeaturePyramid& guide, Instrumentation* instr = nullptr);

    const MatchingConfig& config() const { return cfg_; }
    bool builds_global() const { return build_global_; }

private:
    MatchingConfig cfg_;
    bool build_global_;
    HourglassRegularizer hourglass_{nullptr};
    InitDisparityRegressor init_regressor_{nullptr};
    LatentCompressor compressor_{nullptr};
    torch::nn::ModuleList blocks_;
};
TORCH_MODULE(LgcvMatcher);

}  // namespace mlg
