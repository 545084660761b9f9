#pragma once
// IoU, all-point interpolated average precision, mAP50 and the confusion
// matrix with a trailing background row/column.

#include <algorithm>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/geometry.hpp"
#include "synthloop/core/text.hpp"
#include "synthloop/detector.hpp"

namespace synthloop {

inline double iou(const Box& a, const Box& b) {
    if (a.degenerate() || b.degenerate()) return 0.0;
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

struct ConfusionMatrix {
    int size = 0;  // C+1, background last
    std::vector<double> cells;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int n) : size(n), cells(static_cast<size_t>(n) * n, 0.0) {}
    double& operator()(int r, int c) { return cells[static_cast<size_t>(r) * size + c]; }
    double operator()(int r, int c) const { return cells[static_cast<size_t>(r) * size + c]; }
    double row_sum(int r) const {
        double s = 0;
        for (int c = 0; c < size; ++c) s += (*this)(r, c);
        return s;
    }
    int background() const { return size - 1; }
    bool operator==(const ConfusionMatrix&) const = default;
};

inline std::string serialize_confusion(const ConfusionMatrix& m, const std::vector<std::string>& classes) {
    std::ostringstream os;
    os << "#";
    for (const auto& c : classes) os << ' ' << c;
    os << " background\n";
    for (int r = 0; r < m.size; ++r) {
        for (int c = 0; c < m.size; ++c) os << (c ? " " : "") << text::fmt9(m(r, c));
        os << "\n";
    }
    return os.str();
}

inline ConfusionMatrix parse_confusion(const std::string& s) {
    std::vector<std::vector<double>> rows;
    for (const auto& line : text::lines(s)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> row;
        for (const auto& tok : text::split_ws(line)) {
            double v;
            if (!text::parse_double(tok, v)) throw Error(ErrorCode::parse_error, "bad confusion cell: " + tok);
            row.push_back(v);
        }
        rows.push_back(row);
    }
    ConfusionMatrix m(static_cast<int>(rows.size()));
    for (int r = 0; r < m.size; ++r) {
        if (static_cast<int>(rows[static_cast<size_t>(r)].size()) != m.size)
            throw Error(ErrorCode::parse_error, "confusion matrix is not square");
        for (int c = 0; c < m.size; ++c) m(r, c) = rows[static_cast<size_t>(r)][static_cast<size_t>(c)];
    }
    return m;
}

// All-point interpolated AP from detections (score, is_true_positive) and the
// number of positives.
inline double average_precision(std::vector<std::pair<double, bool>> dets, size_t num_positives) {
    if (num_positives == 0) return 0.0;
    std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<double> recall, precision;
    size_t tp = 0;
    for (size_t i = 0; i < dets.size(); ++i) {
        tp += dets[i].second;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(num_positives));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    // precision envelope, then area under the step curve
    for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0, prev_recall = 0;
    for (size_t i = 0; i < recall.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

struct GroundTruth {
    int label = kBackground;  // 0..C-1, or kBackground
    std::optional<Box> bbox;
};

struct EvaluationResult {
    double map50 = 0;
    std::vector<double> ap;  // per vehicle class; classes with no ground truth are excluded from the mean
    std::vector<int> positives;
    ConfusionMatrix confusion;
    std::vector<int> predicted;  // per sample: confusion-matrix column
};

// Pure evaluation over per-sample detections. Each sample contributes one
// proposal (its best vehicle class) to that class's ranked list; the
// confusion matrix takes the argmax class, requiring IoU >= threshold for a
// vehicle prediction on a vehicle sample to count as that class.
inline EvaluationResult evaluate_detections(const std::vector<GroundTruth>& gts, const std::vector<Detection>& dets,
                                            int num_classes, double iou_threshold = 0.5) {
    require(gts.size() == dets.size(), "one detection per ground truth sample", "detections");
    EvaluationResult res;
    res.confusion = ConfusionMatrix(num_classes + 1);
    res.ap.assign(static_cast<size_t>(num_classes), 0.0);
    res.positives.assign(static_cast<size_t>(num_classes), 0);
    std::vector<std::vector<std::pair<double, bool>>> per_class(static_cast<size_t>(num_classes));
    const int bg = num_classes;
    for (size_t i = 0; i < gts.size(); ++i) {
        const auto& gt = gts[i];
        const auto& d = dets[i];
        const bool vehicle = gt.label != kBackground && gt.bbox.has_value();
        if (vehicle) ++res.positives[static_cast<size_t>(gt.label)];
        const double overlap = vehicle ? iou(d.bbox, *gt.bbox) : 0.0;
        const auto [cls, score] = d.proposal();
        per_class[static_cast<size_t>(cls)].push_back({score, vehicle && cls == gt.label && overlap >= iou_threshold});

        const int row = vehicle ? gt.label : bg;
        int col = d.predicted;
        if (vehicle && col != bg && overlap < iou_threshold) col = bg;
        res.confusion(row, col) += 1;
        res.predicted.push_back(col);
    }
    int counted = 0;
    double sum = 0;
    for (int c = 0; c < num_classes; ++c) {
        res.ap[static_cast<size_t>(c)] = average_precision(per_class[static_cast<size_t>(c)], static_cast<size_t>(res.positives[static_cast<size_t>(c)]));
        if (res.positives[static_cast<size_t>(c)] > 0) {
            sum += res.ap[static_cast<size_t>(c)];
            ++counted;
        }
    }
    res.map50 = counted ? sum / counted : 0.0;
    return res;
}

inline std::vector<GroundTruth> ground_truth(const DatasetManifest& m) {
    std::vector<GroundTruth> out;
    for (const auto& r : m.records) out.push_back({r.bbox ? r.label : kBackground, r.bbox});
    return out;
}

inline EvaluationResult evaluate(const DetectorModel& model, const DatasetManifest& test, const MatrixXd& pooled,
                                 double iou_threshold = 0.5) {
    if (test.records.empty()) throw Error(ErrorCode::invalid_argument, "test manifest is empty", "manifest");
    require(model.num_classes == static_cast<int>(test.classes.size()), "model and manifest class counts differ", "model");
    return evaluate_detections(ground_truth(test), predict_pooled(model, pooled), model.num_classes, iou_threshold);
}

inline EvaluationResult evaluate(const DetectorModel& model, const DatasetManifest& test, double iou_threshold = 0.5) {
    if (test.records.empty()) throw Error(ErrorCode::invalid_argument, "test manifest is empty", "manifest");
    return evaluate(model, test, pool_inputs(load_images(test)), iou_threshold);
}

}  // namespace synthloop
