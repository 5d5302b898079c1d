#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <vector>

#include "mlg/core_types.hpp"
#include "mlg/instrumentation.hpp"

namespace mlg {

struct DecoderConfig {
    int64_t lookup_radius = 4;   // R = 2r + 1 samples
    int64_t iterations = 16;     // training default; evaluation may run more
    int64_t small_kernel = 3;
    int64_t large_kernel = 5;
    int64_t upsample_factor = 4; // fixed by the 1/4-resolution pipeline
    int64_t hidden_channels = 64;
    int64_t motion_channels = 64;

    void validate() const;
};

/// How the decoder consumes the global cost volume.
enum class GuidanceMode {
    cross_attention,  // full model: E_k = FFN(CrossAttention(L_k, GCV))
    concat,           // "w/o LGRU": GCV tokens concatenated into the motion input
    none,             // "w/o LGCV": local lookup only
};

/// Samples the cost volume along the disparity axis at d + o for
/// o in [-r, r] with linear interpolation; out-of-range positions clamp to
/// the boundary bin. Returns [B, C, R, H/4, W/4].
torch::Tensor lookup_lcv(const LocalCostVolume& lcv, const torch::Tensor& disparity, int64_t radius);

/// Cross-attention from the R local lookup tokens (queries) to the L global
/// tokens of the GCV, followed by a feed-forward network with a residual
/// back onto the lookup tokens. Single-head; no position encoding on the
/// latent axis, so the global tokens act as a set.
class GlobalGuidanceImpl : public torch::nn::Module {
public:
    explicit GlobalGuidanceImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& lookup_tokens, const GlobalCostVolume& gcv,
                          Instrumentation* instr = nullptr);

private:
    torch::nn::Linear wq_{nullptr}, wk_{nullptr}, wv_{nullptr}, ffn1_{nullptr}, ffn2_{nullptr};
    int64_t channels_;
};
TORCH_MODULE(GlobalGuidance);

/// Two convolutional mixing layers over the channel-concatenated
/// (E_k, L_k, d_{k-1}) stack.
class MotionEncoderImpl : public torch::nn::Module {
public:
    MotionEncoderImpl(int64_t in_channels, int64_t out_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(MotionEncoder);

/// Dual-kernel selective ConvGRU cell: small- and large-kernel gate stacks
/// fused by a context-derived attention map A.
class SelectiveGruCellImpl : public torch::nn::Module {
public:
    SelectiveGruCellImpl(int64_t hidden, int64_t input_channels, int64_t context_dim,
                         int64_t small_kernel, int64_t large_kernel);
    torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& x,
                          const ContextPyramid::GateInputs& gates, const torch::Tensor& ctx,
                          Instrumentation* instr = nullptr);

private:
    torch::nn::Conv2d convz_s_{nullptr}, convr_s_{nullptr}, convh_s_{nullptr};
    torch::nn::Conv2d convz_l_{nullptr}, convr_l_{nullptr}, convh_l_{nullptr};
    torch::nn::Conv2d conv_att_{nullptr};
};
TORCH_MODULE(SelectiveGruCell);

/// Multi-level recurrent update over hidden states at 1/4, 1/8 and 1/16.
/// Motion features enter at 1/4; levels exchange information by pooling and
/// bilinear upsampling, coarsest first.
class MultiLevelUpdateImpl : public torch::nn::Module {
public:
    MultiLevelUpdateImpl(int64_t hidden, int64_t motion_channels, int64_t context_dim,
                         int64_t small_kernel, int64_t large_kernel);
    std::array<torch::Tensor, 3> forward(const std::array<torch::Tensor, 3>& hidden,
                                         const torch::Tensor& motion, const ContextPyramid& ctx,
                                         Instrumentation* instr = nullptr);

private:
    SelectiveGruCell cell1_{nullptr}, cell2_{nullptr}, cell3_{nullptr};
};
TORCH_MODULE(MultiLevelUpdate);

/// Convex upsampling: per output pixel, 9 softmaxed weights over the 3x3
/// coarse neighborhood; values rescaled by the factor to full-resolution
/// pixel units.
class ConvexUpsamplerImpl : public torch::nn::Module {
public:
    ConvexUpsamplerImpl(int64_t hidden, int64_t factor);
    torch::Tensor forward(const torch::Tensor& disparity, const torch::Tensor& hidden,
                          Instrumentation* instr = nullptr);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    int64_t factor_;
};
TORCH_MODULE(ConvexUpsampler);

struct DecodeResult {
    std::vector<torch::Tensor> disparities_full;  // one [B, 1, H, W] map per iteration
    torch::Tensor final_quarter;                  // [B, 1, H/4, W/4]
};

/// The iterative refinement loop: lookup, global guidance, motion encoding,
/// selective recurrent update, residual decoding and convex upsampling.
class LgruDecoderImpl : public torch::nn::Module {
public:
    LgruDecoderImpl(const DecoderConfig& cfg, int64_t volume_channels, int64_t latent_count,
                    int64_t context_dim, GuidanceMode mode);

    DecodeResult run_iterations(const LocalCostVolume& lcv, const GlobalCostVolume& gcv,
                                const torch::Tensor& init_disparity, const ContextPyramid& ctx,
                                int64_t iterations, Instrumentation* instr = nullptr);

    const DecoderConfig& config() const { return cfg_; }
    GuidanceMode mode() const { return mode_; }

private:
    DecoderConfig cfg_;
    GuidanceMode mode_;
    int64_t volume_channels_;
    GlobalGuidance guidance_{nullptr};
    MotionEncoder motion_{nullptr};
    MultiLevelUpdate update_{nullptr};
    torch::nn::ModuleList hidden_init_;
    torch::nn::Conv2d head1_{nullptr}, head2_{nullptr};
    ConvexUpsampler upsampler_{nullptr};
};
TORCH_MODULE(LgruDecoder);

}  // namespace mlg
