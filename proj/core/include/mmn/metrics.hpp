#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mmn/skeleton_data.hpp"

namespace mmn {

// Per-sample class scores (raw logits or probabilities; ranking metrics are
// invariant to monotone rescaling).  `labels` may be empty until ground
// truth is attached from a dataset.
struct PredictionSet {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> scores;
    std::vector<int> labels;

    std::size_t size() const { return ids.size(); }
    std::size_t num_classes() const { return scores.empty() ? 0 : scores[0].size(); }
    bool has_labels() const { return !labels.empty(); }
    void validate() const;
};

// Index of the highest score; ties go to the lowest index.
std::size_t argmax_score(const std::vector<double>& scores);

// Rank of the true class under the same tie rule: classes scoring strictly
// higher count, plus equal-scoring classes with a lower index.
std::size_t rank_of_label(const std::vector<double>& scores, int label);

double topk_accuracy(const PredictionSet& ps, std::size_t k);

struct F1Result {
    std::vector<double> per_class; // size K, zero for degenerate classes
    double macro = 0.0;            // averaged over classes present in truth or predictions
    double micro = 0.0;            // global counts; equals accuracy here
};

F1Result f1_scores(const std::vector<int>& truth, const std::vector<int>& predicted,
                   std::size_t num_classes);

struct MetricsReport {
    double top1_action = 0.0;
    double top5_action = 0.0;
    double top1_body = 0.0;
    double f1_macro_action = 0.0;
    double f1_micro_action = 0.0;
    double f1_macro_body = 0.0;
    double f1_micro_body = 0.0;
    double f1_mean = 0.0; // mean of the four F1 components above
    std::vector<double> per_class_f1;
};

MetricsReport compute_metrics(const PredictionSet& ps, const LabelTaxonomy& taxonomy);

// Softmax both score sets, then blend as w*a + (1-w)*b, matching rows by id.
PredictionSet ensemble_scores(const PredictionSet& a, const PredictionSet& b, double w);

// counts[true][predicted]
std::vector<std::vector<long>> confusion_matrix(const PredictionSet& ps);

void save_predictions(const std::string& path, const PredictionSet& ps);
PredictionSet load_predictions(const std::string& path);

// Fills ps.labels by joining ids against the dataset.
void attach_labels(PredictionSet& ps, const Dataset& ds);

void write_report_json(const std::string& path, const MetricsReport& report);
void write_confusion_csv(const std::string& path, const std::vector<std::vector<long>>& counts,
                         const std::vector<std::string>& class_names);

// Joint coordinates to bone vectors: bone[v] = joint[v] - joint[parent[v]],
// zero at roots (parent[v] == v).  Rejects malformed or cyclic parent maps.
Dataset to_bone(const Dataset& ds, const std::vector<int>& parents);

std::vector<int> load_parents(const std::string& path);
void save_parents(const std::string& path, const std::vector<int>& parents);

} // namespace mmn
