#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <set>
#include <utility>
#include <vector>

#include "mlg/core_types.hpp"
#include "mlg/instrumentation.hpp"

namespace mlg {

/// Multi-granularity feature network configuration. `base_patch` is the side
/// length of the tiles fed to the shared backbone; `backbone_patch` is how
/// many tokens the backbone produces per tile side, so the tokenizer stride
/// is base_patch / backbone_patch (16 with the defaults — tokens land at
/// 1/16 of whatever the backbone sees).
struct EncoderConfig {
    int64_t base_patch = 32;
    int64_t embed_dim = 64;
    int64_t depth = 4;  // even; middle tap = depth/2, full path taps at depth/4 steps
    int64_t heads = 4;
    int64_t backbone_patch = 2;
    int64_t finetune_tail = 2;
    int64_t mlp_ratio = 4;
    double norm_mean = 0.5;
    double norm_std = 0.5;

    int64_t token_stride() const { return base_patch / backbone_patch; }
    void validate() const;
};

enum class LevelTag { patch_mid, patch_last, full_multi };
enum class PatchScale { full, half };

/// Tiling of a (padded) image into overlapping base_patch tiles.
struct PatchGrid {
    torch::Tensor patches;  // [B, N, 3, P, P]
    std::vector<std::pair<int64_t, int64_t>> positions;  // (y, x) top-left, row-major
    PatchScale scale = PatchScale::full;
    double overlap_fraction = 0.25;
    int64_t patch_size = 0;
    int64_t source_height = 0;
    int64_t source_width = 0;
};

/// A merged 2-d token map at a fixed fraction of its source resolution.
struct TokenGrid {
    torch::Tensor tokens;  // [B, C, h, w]
    LevelTag level_tag = LevelTag::patch_last;
    int64_t source_height = 0;
    int64_t source_width = 0;
};

/// Tile positions along one axis: multiples of the stride with the final
/// tile snapped to the far edge so coverage is exact.
std::vector<int64_t> tile_positions(int64_t extent, int64_t patch, int64_t stride);

/// Splits a padded image batch into overlapping patches. overlap must be
/// 1/4 (full scale) or 1/2 (half scale). Throws ImageTooSmall.
PatchGrid tile_image(const torch::Tensor& images, int64_t patch, double overlap);

/// Merges per-patch token maps into one grid at source/(P/p) resolution
/// (1/16 with default configs). In overlap regions a cell takes its token
/// from the patch whose center is nearest the cell center; ties go to the
/// earlier patch in row-major order. Throws InconsistentTokenDims.
TokenGrid merge_patch_tokens(const std::vector<torch::Tensor>& per_patch_tokens,
                             const PatchGrid& grid, LevelTag tag);

/// Tap layers permitted by encode_tokens for a backbone of `depth` blocks:
/// the quarter points {depth/4, depth/2, 3*depth/4, depth} where integral.
std::set<int64_t> allowed_tap_layers(int64_t depth);

class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x, Instrumentation* instr);

private:
    torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr};
    torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
    int64_t heads_;
};
TORCH_MODULE(TransformerBlock);

/// Plain ViT trunk shared by the patch and full-image paths. Tokenizes at
/// stride base_patch/backbone_patch, adds fixed sinusoidal positions, and
/// exposes token maps after the requested blocks.
class ViTBackboneImpl : public torch::nn::Module {
public:
    explicit ViTBackboneImpl(const EncoderConfig& cfg);

    /// Token maps [B, embed, h, w] for each requested tap layer, in the
    /// order given. Throws BadTapLayer for layers outside the allowed set.
    std::vector<torch::Tensor> forward_taps(const torch::Tensor& x,
                                            const std::vector<int64_t>& taps,
                                            Instrumentation* instr = nullptr);

    int64_t depth() const { return cfg_.depth; }
    const EncoderConfig& config() const { return cfg_; }

private:
    EncoderConfig cfg_;
    torch::nn::Conv2d patch_embed_{nullptr};
    torch::nn::ModuleList blocks_;
};
TORCH_MODULE(ViTBackbone);

class ResConvBlockImpl : public torch::nn::Module {
public:
    explicit ResConvBlockImpl(int64_t dim);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(ResConvBlock);

/// Fuses the three merged token grids into a 4-level pyramid at 1/4..1/32
/// resolution via per-level projection, strided-conv downsampling,
/// transposed-conv upsampling and residual blocks.
class FeatureFusionImpl : public torch::nn::Module {
public:
    FeatureFusionImpl(int64_t c_patch_full, int64_t c_patch_half, int64_t c_full,
                      int64_t dim);
    FeaturePyramid forward(const TokenGrid& t0, const TokenGrid& t1, const TokenGrid& t2);

private:
    torch::nn::Conv2d proj0_{nullptr}, proj1_{nullptr}, proj2_{nullptr}, down_{nullptr};
    torch::nn::ConvTranspose2d up8_{nullptr}, up4_{nullptr};
    ResConvBlock res4_{nullptr}, res8_{nullptr}, res16_{nullptr}, res32_{nullptr};
    int64_t dim_;
};
TORCH_MODULE(FeatureFusion);

/// Image-feature and context heads applied on top of the fused pyramid.
/// The context head also emits the per-level gate injections (c_z, c_r, c_h)
/// sized for the recurrent unit's hidden state.
class PyramidHeadsImpl : public torch::nn::Module {
public:
    PyramidHeadsImpl(int64_t dim, int64_t hidden_channels);
    std::pair<FeaturePyramid, ContextPyramid> forward(const FeaturePyramid& base);

private:
    torch::nn::ModuleList img_heads_, ctx_heads_, gate_heads_;
    int64_t hidden_;
};
TORCH_MODULE(PyramidHeads);

/// Common interface for the feature/context encoder so the ablation variant
/// can swap in a plain convolutional pyramid.
class StereoEncoderImpl : public torch::nn::Module {
public:
    ~StereoEncoderImpl() override = default;
    virtual std::pair<FeaturePyramid, ContextPyramid> encode(const torch::Tensor& images,
                                                             Instrumentation* instr) = 0;
};

class MgfnEncoderImpl : public StereoEncoderImpl {
public:
    MgfnEncoderImpl(const EncoderConfig& cfg, int64_t hidden_channels);

    std::pair<FeaturePyramid, ContextPyramid> encode(const torch::Tensor& images,
                                                     Instrumentation* instr) override;

    ViTBackbone& backbone() { return backbone_; }
    const EncoderConfig& config() const { return cfg_; }

    /// Loads external backbone weights (name -> tensor) and freezes all
    /// backbone parameters except normalization layers and the final
    /// `finetune_tail` blocks.
    void load_backbone_weights(const std::vector<std::pair<std::string, torch::Tensor>>& blobs);

private:
    TokenGrid merged_patch_tokens(const torch::Tensor& x, double overlap, PatchScale scale,
                                  Instrumentation* instr);

    EncoderConfig cfg_;
    ViTBackbone backbone_{nullptr};
    FeatureFusion fusion_{nullptr};
    PyramidHeads heads_{nullptr};
};
TORCH_MODULE(MgfnEncoder);

/// Ablation fallback: a strided convolutional pyramid with the same output
/// shapes and heads as the MGFN.
class ConvPyramidEncoderImpl : public StereoEncoderImpl {
public:
    ConvPyramidEncoderImpl(const EncoderConfig& cfg, int64_t hidden_channels);
    std::pair<FeaturePyramid, ContextPyramid> encode(const torch::Tensor& images,
                                                     Instrumentation* instr) override;

private:
    EncoderConfig cfg_;
    torch::nn::Sequential stem_{nullptr};
    torch::nn::ModuleList downs_, refines_;
    PyramidHeads heads_{nullptr};
};
TORCH_MODULE(ConvPyramidEncoder);

}  // namespace mlg
