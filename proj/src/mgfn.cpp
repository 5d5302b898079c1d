#include "mlg/mgfn.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mlg/errors.hpp"
#include "mlg/nn_utils.hpp"

namespace mlg {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

void EncoderConfig::validate() const {
    TORCH_CHECK(depth >= 2 && depth % 2 == 0, "EncoderConfig: depth must be even");
    TORCH_CHECK(base_patch % 16 == 0, "EncoderConfig: base_patch must be divisible by 16");
    TORCH_CHECK(backbone_patch >= 1 && base_patch % backbone_patch == 0,
                "EncoderConfig: base_patch must be divisible by backbone_patch");
    TORCH_CHECK(embed_dim % heads == 0, "EncoderConfig: embed_dim must be divisible by heads");
    TORCH_CHECK(embed_dim % 4 == 0, "EncoderConfig: embed_dim must be divisible by 4");
    TORCH_CHECK(finetune_tail >= 0 && finetune_tail <= depth,
                "EncoderConfig: finetune_tail out of range");
}

std::vector<int64_t> tile_positions(int64_t extent, int64_t patch, int64_t stride) {
    std::vector<int64_t> out;
    for (int64_t p = 0;; p += stride) {
        int64_t snapped = std::min(p, extent - patch);
        if (out.empty() || snapped > out.back()) {
            out.push_back(snapped);
        }
        if (snapped == extent - patch) {
            break;
        }
    }
    return out;
}

PatchGrid tile_image(const torch::Tensor& images, int64_t patch, double overlap) {
    TORCH_CHECK(images.dim() == 4, "tile_image: expected [B, C, H, W]");
    TORCH_CHECK(overlap == 0.25 || overlap == 0.5, "tile_image: overlap must be 1/4 or 1/2");
    const int64_t h = images.size(2);
    const int64_t w = images.size(3);
    if (h < patch || w < patch) {
        throw ImageTooSmall("tile_image: image " + std::to_string(h) + "x" + std::to_string(w) +
                            " smaller than patch " + std::to_string(patch));
    }
    const int64_t stride = static_cast<int64_t>(std::llround(double(patch) * (1.0 - overlap)));

    PatchGrid grid;
    grid.scale = overlap == 0.25 ? PatchScale::full : PatchScale::half;
    grid.overlap_fraction = overlap;
    grid.patch_size = patch;
    grid.source_height = h;
    grid.source_width = w;

    auto ys = tile_positions(h, patch, stride);
    auto xs = tile_positions(w, patch, stride);
    std::vector<torch::Tensor> tiles;
    tiles.reserve(ys.size() * xs.size());
    for (int64_t y : ys) {
        for (int64_t x : xs) {
            grid.positions.emplace_back(y, x);
            tiles.push_back(
                images.index({Slice(), Slice(), Slice(y, y + patch), Slice(x, x + patch)}));
        }
    }
    grid.patches = torch::stack(tiles, 1);  // [B, N, C, P, P]
    return grid;
}

TokenGrid merge_patch_tokens(const std::vector<torch::Tensor>& per_patch_tokens,
                             const PatchGrid& grid, LevelTag tag) {
    const int64_t n = static_cast<int64_t>(per_patch_tokens.size());
    TORCH_CHECK(n == static_cast<int64_t>(grid.positions.size()),
                "merge_patch_tokens: token map count does not match patch count");
    TORCH_CHECK(n >= 1, "merge_patch_tokens: no patches");
    const auto ref = per_patch_tokens.front().sizes();
    for (const auto& t : per_patch_tokens) {
        if (t.sizes() != ref) {
            throw InconsistentTokenDims("merge_patch_tokens: patch token maps differ in shape");
        }
    }
    TORCH_CHECK(per_patch_tokens.front().dim() == 4, "merge_patch_tokens: expected [B, C, p, p]");
    const int64_t p = ref[2];
    TORCH_CHECK(ref[3] == p, "merge_patch_tokens: token maps must be square");
    if (grid.patch_size % p != 0) {
        throw InconsistentTokenDims("merge_patch_tokens: patch size not divisible by token dims");
    }
    const int64_t ts = grid.patch_size / p;  // pixels per token
    TORCH_CHECK(grid.source_height % ts == 0 && grid.source_width % ts == 0,
                "merge_patch_tokens: source dims not divisible by token stride");
    const int64_t gh = grid.source_height / ts;
    const int64_t gw = grid.source_width / ts;

    // Ownership: nearest patch center, earlier patch wins ties.
    auto sel = torch::empty({gh, gw}, torch::kLong);
    auto ky = torch::empty({gh, gw}, torch::kLong);
    auto kx = torch::empty({gh, gw}, torch::kLong);
    auto sel_a = sel.accessor<int64_t, 2>();
    auto ky_a = ky.accessor<int64_t, 2>();
    auto kx_a = kx.accessor<int64_t, 2>();
    const double half_patch = double(grid.patch_size) / 2.0;
    for (int64_t cy = 0; cy < gh; ++cy) {
        const double ccy = (double(cy) + 0.5) * double(ts);
        for (int64_t cx = 0; cx < gw; ++cx) {
            const double ccx = (double(cx) + 0.5) * double(ts);
            int64_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int64_t i = 0; i < n; ++i) {
                const double dy = ccy - (double(grid.positions[i].first) + half_patch);
                const double dx = ccx - (double(grid.positions[i].second) + half_patch);
                const double d = dy * dy + dx * dx;
                if (d < best_d) {
                    best_d = d;
                    best = i;
                }
            }
            sel_a[cy][cx] = best;
            const auto& pos = grid.positions[best];
            ky_a[cy][cx] = std::clamp<int64_t>(
                static_cast<int64_t>(std::floor((ccy - double(pos.first)) / double(ts))), 0,
                p - 1);
            kx_a[cy][cx] = std::clamp<int64_t>(
                static_cast<int64_t>(std::floor((ccx - double(pos.second)) / double(ts))), 0,
                p - 1);
        }
    }

    auto stacked = torch::stack(per_patch_tokens, 2);  // [B, C, N, p, p]
    TokenGrid out;
    out.tokens = stacked.index({Slice(), Slice(), sel, ky, kx});  // [B, C, gh, gw]
    out.level_tag = tag;
    out.source_height = grid.source_height;
    out.source_width = grid.source_width;
    return out;
}

std::set<int64_t> allowed_tap_layers(int64_t depth) {
    std::set<int64_t> allowed;
    for (int64_t k = 1; k <= 4; ++k) {
        if ((k * depth) % 4 == 0) {
            allowed.insert(k * depth / 4);
        }
    }
    return allowed;
}

// ---------------------------------------------------------------------------
// Backbone

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio)
    : heads_(heads) {
    ln1_ = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    ln2_ = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
    fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
    fc2_ = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, Instrumentation* instr) {
    auto qkv = qkv_(ln1_(x)).chunk(3, -1);
    auto attn = sdp_attention(qkv[0], qkv[1], qkv[2], heads_, instr);
    auto y = x + proj_(attn);
    return y + fc2_(torch::gelu(fc1_(ln2_(y))));
}

ViTBackboneImpl::ViTBackboneImpl(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int64_t ts = cfg_.token_stride();
    patch_embed_ = register_module(
        "patch_embed",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg_.embed_dim, ts).stride(ts)));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg_.depth; ++i) {
        blocks_->push_back(TransformerBlock(cfg_.embed_dim, cfg_.heads, cfg_.mlp_ratio));
    }
    // ViT-style init: truncated normal on projection weights, zero biases.
    for (auto& p : named_parameters()) {
        if (p.key().find("weight") != std::string::npos &&
            p.key().find("ln") == std::string::npos) {
            trunc_normal_(p.value(), 0.02);
        } else if (p.key().find("bias") != std::string::npos) {
            torch::NoGradGuard g;
            p.value().zero_();
        }
    }
}

std::vector<torch::Tensor> ViTBackboneImpl::forward_taps(const torch::Tensor& x,
                                                         const std::vector<int64_t>& taps,
                                                         Instrumentation* instr) {
    const auto allowed = allowed_tap_layers(cfg_.depth);
    for (int64_t t : taps) {
        if (!allowed.count(t)) {
            throw BadTapLayer("encode_tokens: tap layer " + std::to_string(t) +
                              " not in the quarter-depth set for depth " +
                              std::to_string(cfg_.depth));
        }
    }
    const int64_t ts = cfg_.token_stride();
    TORCH_CHECK(x.dim() == 4 && x.size(1) == 3, "backbone expects [B, 3, H, W]");
    TORCH_CHECK(x.size(2) % ts == 0 && x.size(3) % ts == 0,
                "backbone input dims must be divisible by the token stride");
    const int64_t b = x.size(0);
    const int64_t h = x.size(2) / ts;
    const int64_t w = x.size(3) / ts;

    auto t = patch_embed_(x).flatten(2).transpose(1, 2);  // [B, hw, e]
    t = t + sinusoidal_position_encoding_2d(h, w, cfg_.embed_dim, t.options()).unsqueeze(0);

    std::map<int64_t, torch::Tensor> tapped;
    int64_t layer = 0;
    for (auto& block : *blocks_) {
        t = block->as<TransformerBlockImpl>()->forward(t, instr);
        ++layer;
        if (std::find(taps.begin(), taps.end(), layer) != taps.end()) {
            tapped[layer] = t.transpose(1, 2).reshape({b, cfg_.embed_dim, h, w});
        }
    }
    std::vector<torch::Tensor> out;
    out.reserve(taps.size());
    for (int64_t tap : taps) {
        out.push_back(tapped.at(tap));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fusion and heads

ResConvBlockImpl::ResConvBlockImpl(int64_t dim) {
    conv1_ = register_module(
        "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
    conv2_ = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
}

torch::Tensor ResConvBlockImpl::forward(const torch::Tensor& x) {
    return x + conv2_(torch::gelu(conv1_(x)));
}

FeatureFusionImpl::FeatureFusionImpl(int64_t c_patch_full, int64_t c_patch_half, int64_t c_full,
                                     int64_t dim)
    : dim_(dim) {
    proj0_ = register_module("proj0", torch::nn::Conv2d(c_patch_full, dim, 1));
    proj1_ = register_module("proj1", torch::nn::Conv2d(c_patch_half, dim, 1));
    proj2_ = register_module("proj2", torch::nn::Conv2d(c_full, dim, 1));
    down_ = register_module(
        "down", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).stride(2).padding(1)));
    up8_ = register_module("up8", torch::nn::ConvTranspose2d(
                                      torch::nn::ConvTranspose2dOptions(dim, dim, 4)
                                          .stride(2)
                                          .padding(1)));
    up4_ = register_module("up4", torch::nn::ConvTranspose2d(
                                      torch::nn::ConvTranspose2dOptions(dim, dim, 4)
                                          .stride(2)
                                          .padding(1)));
    res4_ = register_module("res4", ResConvBlock(dim));
    res8_ = register_module("res8", ResConvBlock(dim));
    res16_ = register_module("res16", ResConvBlock(dim));
    res32_ = register_module("res32", ResConvBlock(dim));
}

FeaturePyramid FeatureFusionImpl::forward(const TokenGrid& t0, const TokenGrid& t1,
                                          const TokenGrid& t2) {
    if (t0.source_height != t2.source_height || t0.source_width != t2.source_width ||
        t0.tokens.size(2) != t2.tokens.size(2) || t0.tokens.size(3) != t2.tokens.size(3)) {
        throw ScaleMismatch("fuse_pyramid: patch and full token grids disagree on source size");
    }
    if (t1.source_height * 2 != t0.source_height || t1.source_width * 2 != t0.source_width ||
        t1.tokens.size(2) * 2 != t0.tokens.size(2) ||
        t1.tokens.size(3) * 2 != t0.tokens.size(3)) {
        throw ScaleMismatch("fuse_pyramid: half-scale grid is not half of the full-scale grid");
    }
    // Patch-derived and full-derived streams meet at 1/16.
    auto p16 = res16_->forward(proj0_(t0.tokens) + proj2_(t2.tokens));
    auto p32 = res32_->forward(proj1_(t1.tokens) + down_(p16));
    auto p8 = res8_->forward(up8_(p16));
    auto p4 = res4_->forward(up4_(p8));
    FeaturePyramid pyr;
    pyr.levels = {p4, p8, p16, p32};
    pyr.dim = dim_;
    return pyr;
}

PyramidHeadsImpl::PyramidHeadsImpl(int64_t dim, int64_t hidden_channels)
    : hidden_(hidden_channels) {
    img_heads_ = register_module("img_heads", torch::nn::ModuleList());
    ctx_heads_ = register_module("ctx_heads", torch::nn::ModuleList());
    gate_heads_ = register_module("gate_heads", torch::nn::ModuleList());
    auto make_head = [&](int64_t out) {
        return torch::nn::Sequential(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)),
            torch::nn::GELU(),
            torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, out, 3).padding(1)));
    };
    for (int i = 0; i < 4; ++i) {
        img_heads_->push_back(make_head(dim));
    }
    for (int i = 0; i < 3; ++i) {
        ctx_heads_->push_back(make_head(dim));
        gate_heads_->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(dim, 3 * hidden_channels, 3).padding(1)));
    }
}

std::pair<FeaturePyramid, ContextPyramid> PyramidHeadsImpl::forward(const FeaturePyramid& base) {
    FeaturePyramid feat;
    feat.dim = base.dim;
    for (int i = 0; i < 4; ++i) {
        feat.levels[i] = img_heads_[i]->as<torch::nn::SequentialImpl>()->forward(base.levels[i]);
    }
    ContextPyramid ctx;
    for (int i = 0; i < 3; ++i) {
        auto c = ctx_heads_[i]->as<torch::nn::SequentialImpl>()->forward(base.levels[i]);
        ctx.levels[i] = c;
        auto g = gate_heads_[i]->as<torch::nn::Conv2dImpl>()->forward(c).chunk(3, 1);
        ctx.gate_inputs[i] = {g[0], g[1], g[2]};
    }
    return {feat, ctx};
}

// ---------------------------------------------------------------------------
// MGFN encoder

MgfnEncoderImpl::MgfnEncoderImpl(const EncoderConfig& cfg, int64_t hidden_channels) : cfg_(cfg) {
    cfg_.validate();
    TORCH_CHECK(cfg_.depth % 4 == 0,
                "MgfnEncoder: full-image path taps quarter depths; depth must be divisible by 4");
    backbone_ = register_module("backbone", ViTBackbone(cfg_));
    const int64_t e = cfg_.embed_dim;
    fusion_ = register_module("fusion", FeatureFusion(2 * e, 2 * e, 4 * e, e));
    heads_ = register_module("heads", PyramidHeads(e, hidden_channels));
}

TokenGrid MgfnEncoderImpl::merged_patch_tokens(const torch::Tensor& x, double overlap,
                                               PatchScale scale, Instrumentation* instr) {
    (void)scale;
    auto grid = tile_image(x, cfg_.base_patch, overlap);
    const int64_t b = x.size(0);
    const int64_t n = static_cast<int64_t>(grid.positions.size());
    auto flat = grid.patches.reshape({b * n, 3, cfg_.base_patch, cfg_.base_patch});
    auto taps = backbone_->forward_taps(flat, {cfg_.depth / 2, cfg_.depth}, instr);

    auto merge_tap = [&](const torch::Tensor& t, LevelTag tag) {
        auto per_patch = t.reshape({b, n, t.size(1), t.size(2), t.size(3)});
        std::vector<torch::Tensor> maps;
        maps.reserve(n);
        for (int64_t i = 0; i < n; ++i) {
            maps.push_back(per_patch.select(1, i));
        }
        return merge_patch_tokens(maps, grid, tag);
    };
    auto mid = merge_tap(taps[0], LevelTag::patch_mid);
    auto last = merge_tap(taps[1], LevelTag::patch_last);
    TokenGrid out;
    out.tokens = torch::cat({mid.tokens, last.tokens}, 1);
    out.level_tag = LevelTag::patch_last;
    out.source_height = grid.source_height;
    out.source_width = grid.source_width;
    return out;
}

std::pair<FeaturePyramid, ContextPyramid> MgfnEncoderImpl::encode(const torch::Tensor& images,
                                                                  Instrumentation* instr) {
    TORCH_CHECK(images.dim() == 4 && images.size(1) == 3, "encoder expects [B, 3, H, W]");
    const int64_t h = images.size(2);
    const int64_t w = images.size(3);
    TORCH_CHECK(h % 32 == 0 && w % 32 == 0, "encoder expects inputs padded to multiples of 32");
    const int64_t ts = cfg_.token_stride();

    auto x = (images - cfg_.norm_mean) / cfg_.norm_std;

    // Full-scale patch stream at source/16.
    auto t0 = merged_patch_tokens(x, 0.25, PatchScale::full, instr);

    // Half-scale patch stream at source/32; the half image is padded up to a
    // patch multiple before tiling and the merged grid cropped back.
    auto xh = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
    auto [xhp, rec] = pad_to_multiple(xh, cfg_.base_patch);
    auto t1 = merged_patch_tokens(xhp, 0.5, PatchScale::half, instr);
    t1.tokens = t1.tokens.index(
        {Slice(), Slice(), Slice(0, (h / 2) / ts), Slice(0, (w / 2) / ts)});
    t1.source_height = h / 2;
    t1.source_width = w / 2;

    // Full-image stream, four tap levels concatenated.
    const int64_t d = cfg_.depth;
    auto full_taps = backbone_->forward_taps(x, {d / 4, d / 2, 3 * d / 4, d}, instr);
    TokenGrid t2;
    t2.tokens = torch::cat(full_taps, 1);
    t2.level_tag = LevelTag::full_multi;
    t2.source_height = h;
    t2.source_width = w;

    auto base = fusion_->forward(t0, t1, t2);
    return heads_->forward(base);
}

void MgfnEncoderImpl::load_backbone_weights(
    const std::vector<std::pair<std::string, torch::Tensor>>& blobs) {
    auto params = backbone_->named_parameters();
    torch::NoGradGuard guard;
    for (const auto& [name, value] : blobs) {
        auto* p = params.find(name);
        TORCH_CHECK(p != nullptr, "load_backbone_weights: unknown parameter ", name);
        TORCH_CHECK(p->sizes() == value.sizes(), "load_backbone_weights: shape mismatch for ",
                    name);
        p->copy_(value);
    }
    // Freeze everything except normalization layers and the last finetune_tail blocks.
    for (auto& p : backbone_->named_parameters()) {
        bool trainable = p.key().find("ln") != std::string::npos;
        auto bpos = p.key().find("blocks.");
        if (bpos != std::string::npos) {
            int64_t idx = std::stoll(p.key().substr(bpos + 7));
            if (idx >= cfg_.depth - cfg_.finetune_tail) {
                trainable = true;
            }
        }
        p.value().set_requires_grad(trainable);
    }
}

// ---------------------------------------------------------------------------
// Ablation encoder

ConvPyramidEncoderImpl::ConvPyramidEncoderImpl(const EncoderConfig& cfg, int64_t hidden_channels)
    : cfg_(cfg) {
    const int64_t e = cfg_.embed_dim;
    stem_ = register_module(
        "stem", torch::nn::Sequential(
                    torch::nn::Conv2d(torch::nn::Conv2dOptions(3, e / 2, 3).stride(2).padding(1)),
                    torch::nn::GELU(),
                    torch::nn::Conv2d(torch::nn::Conv2dOptions(e / 2, e, 3).stride(2).padding(1)),
                    torch::nn::GELU()));
    downs_ = register_module("downs", torch::nn::ModuleList());
    refines_ = register_module("refines", torch::nn::ModuleList());
    for (int i = 0; i < 3; ++i) {
        downs_->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(e, e, 3).stride(2).padding(1)));
    }
    for (int i = 0; i < 4; ++i) {
        refines_->push_back(ResConvBlock(e));
    }
    heads_ = register_module("heads", PyramidHeads(e, hidden_channels));
}

std::pair<FeaturePyramid, ContextPyramid> ConvPyramidEncoderImpl::encode(
    const torch::Tensor& images, Instrumentation* instr) {
    (void)instr;
    TORCH_CHECK(images.dim() == 4 && images.size(1) == 3, "encoder expects [B, 3, H, W]");
    TORCH_CHECK(images.size(2) % 32 == 0 && images.size(3) % 32 == 0,
                "encoder expects inputs padded to multiples of 32");
    auto x = (images - cfg_.norm_mean) / cfg_.norm_std;
    FeaturePyramid base;
    base.dim = cfg_.embed_dim;
    auto cur = stem_->forward(x);
    base.levels[0] = refines_[0]->as<ResConvBlockImpl>()->forward(cur);
    for (int i = 0; i < 3; ++i) {
        cur = torch::gelu(downs_[i]->as<torch::nn::Conv2dImpl>()->forward(cur));
        base.levels[i + 1] = refines_[i + 1]->as<ResConvBlockImpl>()->forward(cur);
    }
    return heads_->forward(base);
}

}  // namespace mlg
