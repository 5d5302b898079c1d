#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <vector>

#include "mlg/errors.hpp"

namespace mlg {

/// A rectified stereo pair with optional dense ground truth.
/// Images are float tensors [3, H, W] with values in [0, 1]; masks are bool
/// tensors [H, W]. Absent fields are default-constructed (undefined) tensors.
struct StereoSample {
    torch::Tensor left;
    torch::Tensor right;
    torch::Tensor gt_disparity;  // [H, W] float, pixels, >= 0 under valid_mask
    torch::Tensor valid_mask;    // [H, W] bool
    torch::Tensor noc_mask;      // [H, W] bool, subset of valid_mask

    int64_t height() const { return left.size(1); }
    int64_t width() const { return left.size(2); }
};

/// Dense disparity estimate. `resolution_scale` is the size of this grid
/// relative to full resolution (1 = full, 0.25 = quarter); values are in
/// pixels of this grid.
struct DisparityMap {
    torch::Tensor values;  // [H, W] float
    double resolution_scale = 1.0;
};

/// Four feature maps f_1..f_4 at 1/4, 1/8, 1/16, 1/32 resolution, all with
/// `dim` channels. Tensors are [B, dim, H/2^{i+1}, W/2^{i+1}].
struct FeaturePyramid {
    std::array<torch::Tensor, 4> levels;
    int64_t dim = 0;
};

/// Context features c_1..c_3 at 1/4, 1/8, 1/16 plus the per-level gate
/// injections (c_z, c_r, c_h) consumed by the recurrent update.
struct ContextPyramid {
    struct GateInputs {
        torch::Tensor z;
        torch::Tensor r;
        torch::Tensor h;
    };
    std::array<torch::Tensor, 3> levels;
    std::array<GateInputs, 3> gate_inputs;
};

/// Grouped all-pairs correlation, values [B, G, D, H/4, W/4].
/// Entries with source column out of image (x - z < 0) are zero.
struct CorrelationVolume {
    torch::Tensor values;
    int64_t groups = 0;
    int64_t max_disparity = 0;
};

/// Locally regularized cost volume, values [B, C, D, H/4, W/4].
struct LocalCostVolume {
    torch::Tensor values;
    int64_t channels = 0;
};

/// Fixed-length latent compression of the correlation volume,
/// tokens [B, H/4*W/4, L, C]. L is set by configuration and does not depend
/// on image width or disparity range.
struct LatentCostSequence {
    torch::Tensor tokens;
    int64_t latent_count = 0;
    int64_t channels = 0;
    int64_t h = 0;  // spatial extent the pixel axis was flattened from
    int64_t w = 0;
};

/// Attention-regularized global volume, values [B, C, L, H/4, W/4].
struct GlobalCostVolume {
    torch::Tensor values;
};

/// State carried across refinement iterations.
struct IterationState {
    DisparityMap disparity;                 // 1/4 resolution
    std::array<torch::Tensor, 3> hidden;    // 1/4, 1/8, 1/16
    int64_t iteration_index = 0;
};

/// Per-side padding amounts produced by pad_to_multiple. All padding goes on
/// the right/bottom edges so pixel coordinates (and disparities) are
/// unaffected.
struct PaddingRecord {
    int64_t orig_height = 0;
    int64_t orig_width = 0;
    int64_t pad_bottom = 0;
    int64_t pad_right = 0;

    int64_t padded_height() const { return orig_height + pad_bottom; }
    int64_t padded_width() const { return orig_width + pad_right; }
};

/// Checks every StereoSample invariant and returns the sample unchanged.
/// Throws ShapeMismatch, InvalidDisparity or MaskInconsistency.
StereoSample validate_sample(const StereoSample& sample);

/// Replicate-pads the trailing two (spatial) dims of `image` up to the next
/// multiples of `multiple`. Padding is appended right/bottom only.
std::pair<torch::Tensor, PaddingRecord> pad_to_multiple(const torch::Tensor& image,
                                                        int64_t multiple);

/// Exact inverse of pad_to_multiple on the spatial dims. Throws
/// RecordMismatch when `values` does not have the padded shape the record
/// describes.
torch::Tensor crop_to_original(const torch::Tensor& values, const PaddingRecord& record);

}  // namespace mlg
