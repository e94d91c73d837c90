#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "attribution.hpp"

namespace sgdrop {

/// Axis-aligned pixel box, inclusive-exclusive.
struct BBox {
    std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    BBox() = default;
    BBox(std::size_t xmin, std::size_t ymin, std::size_t xmax, std::size_t ymax)
        : x_min(xmin), y_min(ymin), x_max(xmax), y_max(ymax) {
        if (x_max <= x_min || y_max <= y_min)
            throw std::invalid_argument("BBox: degenerate box [" + std::to_string(xmin) + "," +
                                        std::to_string(ymin) + "," + std::to_string(xmax) + "," +
                                        std::to_string(ymax) + ")");
    }

    std::size_t area() const { return (x_max - x_min) * (y_max - y_min); }

    bool operator==(const BBox& o) const {
        return x_min == o.x_min && y_min == o.y_min && x_max == o.x_max && y_max == o.y_max;
    }
};

/// Fraction of pixels strictly above 0.5 in a max-normalized saliency image.
template <typename T>
double area_ratio(const SaliencyImage<T>& s) {
    if (s.v.empty()) return 0.0;
    std::size_t n = 0;
    for (T v : s.v)
        if (static_cast<double>(v) > 0.5) ++n;
    return static_cast<double>(n) / static_cast<double>(s.v.size());
}

/// Tight box over all pixels at or above 0.5; nothing qualifies -> no box.
template <typename T>
std::optional<BBox> saliency_bbox(const SaliencyImage<T>& s) {
    std::size_t xmin = s.w, ymin = s.h, xmax = 0, ymax = 0;
    bool any = false;
    for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x)
            if (static_cast<double>(s.at(y, x)) >= 0.5) {
                any = true;
                xmin = std::min(xmin, x);
                ymin = std::min(ymin, y);
                xmax = std::max(xmax, x + 1);
                ymax = std::max(ymax, y + 1);
            }
    if (!any) return std::nullopt;
    return BBox(xmin, ymin, xmax, ymax);
}

inline double iou(const BBox& a, const BBox& b) {
    const std::size_t ix_min = std::max(a.x_min, b.x_min);
    const std::size_t iy_min = std::max(a.y_min, b.y_min);
    const std::size_t ix_max = std::min(a.x_max, b.x_max);
    const std::size_t iy_max = std::min(a.y_max, b.y_max);
    if (ix_max <= ix_min || iy_max <= iy_min) return 0.0;
    const double inter = static_cast<double>((ix_max - ix_min) * (iy_max - iy_min));
    const double uni = static_cast<double>(a.area() + b.area()) - inter;
    return inter / uni;
}

/// Fraction of samples whose saliency box reaches IoU >= 0.5 with any of the
/// sample's ground-truth boxes. A sample without a saliency box is a miss;
/// a sample without ground truth is an error.
inline double hit_ratio(const std::vector<std::optional<BBox>>& saliency_boxes,
                        const std::vector<std::vector<BBox>>& ground_truth) {
    if (saliency_boxes.size() != ground_truth.size())
        throw std::invalid_argument("hit_ratio: " + std::to_string(saliency_boxes.size()) +
                                    " saliency boxes vs " + std::to_string(ground_truth.size()) +
                                    " ground-truth entries");
    if (saliency_boxes.empty()) throw std::invalid_argument("hit_ratio: no samples");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < saliency_boxes.size(); ++i) {
        if (ground_truth[i].empty())
            throw std::invalid_argument("hit_ratio: sample " + std::to_string(i) +
                                        " has no ground-truth box");
        if (!saliency_boxes[i]) continue;
        for (const BBox& gt : ground_truth[i])
            if (iou(*saliency_boxes[i], gt) >= 0.5) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(saliency_boxes.size());
}

struct CoverageResult {
    double global = 0.0;
    double featuremap = 0.0;
};

/// Neuron coverage over an evaluation set: an activation site (one scalar of
/// a post-ReLU layer output, conv sites counted per channel/y/x) is covered
/// when it exceeds 0 for at least one input. `global` aggregates every ReLU
/// output in the network, `featuremap` only the latent map z.
template <typename T>
CoverageResult neuron_coverage(const Model<T>& model, const std::vector<Tensor<T>>& batches) {
    if (batches.empty()) throw std::invalid_argument("neuron_coverage: no batches");
    std::vector<std::vector<char>> relu_covered;
    std::vector<char> z_covered(model.feature_count(), 0);

    for (const Tensor<T>& x : batches) {
        const std::size_t n = x.extent(0);
        std::vector<Tensor<T>> relu_log;
        auto z = model.encode(nullptr, Var<T>::constant(x), false, nullptr, &relu_log);
        model.classify(nullptr, z, false, nullptr, &relu_log);

        if (relu_covered.empty()) relu_covered.resize(relu_log.size());
        for (std::size_t li = 0; li < relu_log.size(); ++li) {
            const Tensor<T>& out = relu_log[li];
            const std::size_t sites = out.numel() / out.extent(0);
            if (relu_covered[li].empty()) relu_covered[li].assign(sites, 0);
            for (std::size_t s = 0; s < out.extent(0); ++s)
                for (std::size_t i = 0; i < sites; ++i)
                    if (out[s * sites + i] > T{0}) relu_covered[li][i] = 1;
        }
        const std::size_t zsites = model.feature_count();
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < zsites; ++i)
                if (z.value[s * zsites + i] > T{0}) z_covered[i] = 1;
    }

    std::size_t total = 0, covered = 0;
    for (const auto& layer : relu_covered) {
        total += layer.size();
        for (char c : layer) covered += static_cast<std::size_t>(c);
    }
    std::size_t zc = 0;
    for (char c : z_covered) zc += static_cast<std::size_t>(c);

    CoverageResult r;
    r.global = total == 0 ? 0.0 : static_cast<double>(covered) / static_cast<double>(total);
    r.featuremap = static_cast<double>(zc) / static_cast<double>(z_covered.size());
    return r;
}

/// Pick the evaluation batches for the coverage protocol: `batch_count`
/// random batches of `batch_size` samples (clamped to the dataset size),
/// deterministic in the seed.
inline std::vector<std::vector<std::size_t>> coverage_batch_indices(std::size_t dataset_size,
                                                                    std::uint64_t seed,
                                                                    std::size_t batch_count = 10,
                                                                    std::size_t batch_size = 64) {
    Rng rng(mix_seed(seed, 0xc0fe));
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < batch_count; ++b) {
        std::vector<std::size_t> idx;
        const std::size_t n = std::min(batch_size, dataset_size);
        for (std::size_t i = 0; i < n; ++i) idx.push_back(rng.below(dataset_size));
        out.push_back(std::move(idx));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-epoch reporting
// ---------------------------------------------------------------------------

struct MetricsReport {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    double accuracy = 0.0;
    std::optional<double> area_ratio;
    std::optional<double> hit_ratio;
    std::optional<double> coverage_global;
    std::optional<double> coverage_featuremap;
    std::optional<double> gap; // train accuracy - test accuracy (summary field)
    std::optional<double> rho;
    std::optional<double> step_time_ms;
};

inline const char* kMetricsCsvHeader =
    "epoch,split,loss,accuracy,area_ratio,hit_ratio,coverage_global,coverage_featuremap,rho,"
    "step_time_ms";

/// Append-only CSV writer for per-epoch rows; the column set is fixed and
/// optional metrics render as empty fields.
class MetricsCsv {
public:
    explicit MetricsCsv(const std::string& path) : f_(path, std::ios::trunc) {
        if (!f_) throw std::runtime_error("cannot write " + path);
        f_ << kMetricsCsvHeader << "\n";
    }

    void append(const MetricsReport& r) {
        f_ << r.epoch << ',' << r.split << ',' << fmt(r.loss) << ',' << fmt(r.accuracy) << ','
           << fmt(r.area_ratio) << ',' << fmt(r.hit_ratio) << ',' << fmt(r.coverage_global) << ','
           << fmt(r.coverage_featuremap) << ',' << fmt(r.rho) << ',' << fmt(r.step_time_ms)
           << '\n';
        f_.flush();
    }

private:
    static std::string fmt(double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return buf;
    }
    static std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

    std::ofstream f_;
};

} // namespace sgdrop
