#include "mlg/core_types.hpp"

#include <torch/torch.h>

namespace mlg {

namespace F = torch::nn::functional;

StereoSample validate_sample(const StereoSample& sample) {
    if (!sample.left.defined() || !sample.right.defined()) {
        throw ShapeMismatch("validate_sample: left/right image missing");
    }
    if (sample.left.dim() != 3 || sample.right.dim() != 3) {
        throw ShapeMismatch("validate_sample: images must be [3, H, W]");
    }
    if (sample.left.sizes() != sample.right.sizes()) {
        throw ShapeMismatch("validate_sample: left/right dims differ");
    }
    const int64_t h = sample.left.size(1);
    const int64_t w = sample.left.size(2);

    auto check_hw = [&](const torch::Tensor& t, const char* name) {
        if (t.dim() != 2 || t.size(0) != h || t.size(1) != w) {
            throw ShapeMismatch(std::string("validate_sample: ") + name +
                                " does not match image dims");
        }
    };

    if (sample.gt_disparity.defined()) {
        check_hw(sample.gt_disparity, "gt_disparity");
        torch::Tensor region = sample.valid_mask.defined()
                                   ? sample.valid_mask
                                   : torch::ones({h, w}, torch::kBool);
        auto gt = sample.gt_disparity.masked_select(region);
        if (gt.numel() > 0) {
            if (!torch::isfinite(gt).all().item<bool>()) {
                throw InvalidDisparity("validate_sample: non-finite gt under valid mask");
            }
            if ((gt < 0).any().item<bool>()) {
                throw InvalidDisparity("validate_sample: negative gt under valid mask");
            }
        }
    }
    if (sample.valid_mask.defined()) {
        check_hw(sample.valid_mask, "valid_mask");
    }
    if (sample.noc_mask.defined()) {
        check_hw(sample.noc_mask, "noc_mask");
        if (sample.valid_mask.defined()) {
            auto outside = sample.noc_mask & ~sample.valid_mask;
            if (outside.any().item<bool>()) {
                throw MaskInconsistency("validate_sample: noc_mask not a subset of valid_mask");
            }
        }
    }
    return sample;
}

std::pair<torch::Tensor, PaddingRecord> pad_to_multiple(const torch::Tensor& image,
                                                        int64_t multiple) {
    TORCH_CHECK(multiple >= 1, "pad_to_multiple: multiple must be >= 1");
    TORCH_CHECK(image.dim() >= 2, "pad_to_multiple: need at least 2 dims");
    const int64_t h = image.size(-2);
    const int64_t w = image.size(-1);
    const int64_t ph = (h + multiple - 1) / multiple * multiple;
    const int64_t pw = (w + multiple - 1) / multiple * multiple;
    PaddingRecord rec{h, w, ph - h, pw - w};
    if (rec.pad_bottom == 0 && rec.pad_right == 0) {
        return {image, rec};
    }
    // Replicate padding needs a 4-d input; fold leading dims temporarily.
    auto x = image;
    auto orig_sizes = image.sizes().vec();
    x = x.reshape({-1, 1, h, w});
    x = F::pad(x, F::PadFuncOptions({0, rec.pad_right, 0, rec.pad_bottom})
                      .mode(torch::kReplicate));
    orig_sizes[orig_sizes.size() - 2] = ph;
    orig_sizes[orig_sizes.size() - 1] = pw;
    return {x.reshape(orig_sizes), rec};
}

torch::Tensor crop_to_original(const torch::Tensor& values, const PaddingRecord& record) {
    TORCH_CHECK(values.dim() >= 2, "crop_to_original: need at least 2 dims");
    const int64_t h = values.size(-2);
    const int64_t w = values.size(-1);
    if (h != record.padded_height() || w != record.padded_width()) {
        throw RecordMismatch("crop_to_original: tensor dims do not match padding record");
    }
    using torch::indexing::Ellipsis;
    using torch::indexing::Slice;
    return values.index({Ellipsis, Slice(0, record.orig_height), Slice(0, record.orig_width)});
}

}  // namespace mlg
