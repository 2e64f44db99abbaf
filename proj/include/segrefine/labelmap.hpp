// Dense per-pixel class-index maps and conversions to/from probability
// tensors. Class indices are uint8 (C <= 255), row-major.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segrefine/errors.hpp"
#include "segrefine/tensor.hpp"

namespace segrefine {

struct LabelMap {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<std::uint8_t> v;  // h*w values, row-major

    LabelMap() = default;
    LabelMap(std::int64_t height, std::int64_t width, std::uint8_t fill = 0)
        : h(height), w(width), v(static_cast<std::size_t>(height * width), fill) {}

    std::int64_t numel() const { return h * w; }
    std::uint8_t at(std::int64_t y, std::int64_t x) const {
        return v[static_cast<std::size_t>(y * w + x)];
    }
    std::uint8_t& at(std::int64_t y, std::int64_t x) {
        return v[static_cast<std::size_t>(y * w + x)];
    }
    bool operator==(const LabelMap& o) const {
        return h == o.h && w == o.w && v == o.v;
    }
};

/// Per-class pixel counts across a batch of maps.
inline std::vector<std::int64_t> class_pixel_counts(const std::vector<LabelMap>& maps,
                                                    std::int64_t num_classes) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (const auto& m : maps) {
        for (std::uint8_t lab : m.v) {
            if (lab >= num_classes) {
                throw ShapeError("label value " + std::to_string(int(lab)) +
                                 " out of range for " + std::to_string(num_classes) +
                                 " classes");
            }
            ++counts[lab];
        }
    }
    return counts;
}

/// [N,C,H,W] one-hot encoding of a label batch. All maps must share H,W.
template <typename T>
Tensor<T> one_hot_batch(const std::vector<LabelMap>& maps, std::int64_t num_classes) {
    if (maps.empty()) throw ShapeError("one_hot_batch: empty batch");
    const std::int64_t h = maps[0].h, w = maps[0].w;
    const std::int64_t n = static_cast<std::int64_t>(maps.size());
    auto out = Tensor<T>::zeros({n, num_classes, h, w});
    auto& ov = out.mutable_data();
    const std::int64_t hw = h * w;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& m = maps[static_cast<std::size_t>(i)];
        if (m.h != h || m.w != w) {
            throw ShapeError("one_hot_batch: inconsistent map sizes in batch");
        }
        for (std::int64_t p = 0; p < hw; ++p) {
            const std::uint8_t lab = m.v[static_cast<std::size_t>(p)];
            if (lab >= num_classes) {
                throw ShapeError("label value " + std::to_string(int(lab)) +
                                 " out of range for " + std::to_string(num_classes) +
                                 " classes");
            }
            ov[static_cast<std::size_t>((i * num_classes + lab) * hw + p)] = T(1);
        }
    }
    return out;
}

/// Channel argmax of [N,C,H,W] scores (logits or probs); ties resolve to the
/// lowest class index, so results do not depend on float noise ordering.
template <typename T>
std::vector<LabelMap> argmax_channels(const Tensor<T>& scores) {
    if (scores.rank() != 4) throw ShapeError("argmax_channels: input must be [N,C,H,W]");
    const std::int64_t n = scores.dim(0), c = scores.dim(1), h = scores.dim(2),
                       w = scores.dim(3);
    if (c > 255) throw ShapeError("argmax_channels: more than 255 classes");
    const std::int64_t hw = h * w;
    std::vector<LabelMap> out;
    out.reserve(static_cast<std::size_t>(n));
    const auto& sv = scores.data();
    for (std::int64_t i = 0; i < n; ++i) {
        LabelMap m(h, w);
        const T* base = sv.data() + i * c * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
            T best = base[p];
            std::uint8_t best_c = 0;
            for (std::int64_t ch = 1; ch < c; ++ch) {
                const T val = base[ch * hw + p];
                if (val > best) {
                    best = val;
                    best_c = static_cast<std::uint8_t>(ch);
                }
            }
            m.v[static_cast<std::size_t>(p)] = best_c;
        }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace segrefine
