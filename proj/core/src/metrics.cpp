#include "mmn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

#include "json.hpp"
#include "mmn/errors.hpp"

namespace mmn {

using nlohmann::json;
using nlohmann::ordered_json;

void PredictionSet::validate() const {
    if (ids.size() != scores.size())
        throw DataError("predictions: " + std::to_string(ids.size()) + " ids for " +
                        std::to_string(scores.size()) + " score rows");
    if (!labels.empty() && labels.size() != ids.size())
        throw DataError("predictions: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(ids.size()) + " rows");
    const std::size_t K = num_classes();
    if (!scores.empty() && K == 0) throw DataError("predictions: empty score rows");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!seen.insert(ids[i]).second)
            throw DataError("predictions: duplicate id '" + ids[i] + "'");
        if (scores[i].size() != K)
            throw DataError("predictions: row '" + ids[i] + "' has " +
                            std::to_string(scores[i].size()) + " scores, expected " +
                            std::to_string(K));
        for (double s : scores[i])
            if (!std::isfinite(s))
                throw DataError("predictions: non-finite score for id '" + ids[i] + "'");
        if (!labels.empty() && (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K))
            throw DataError("predictions: label " + std::to_string(labels[i]) + " for id '" +
                            ids[i] + "' outside [0," + std::to_string(K) + ")");
    }
}

std::size_t argmax_score(const std::vector<double>& scores) {
    if (scores.empty()) throw DataError("argmax of empty score row");
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

std::size_t rank_of_label(const std::vector<double>& scores, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= scores.size())
        throw DataError("rank_of_label: label " + std::to_string(label) + " outside [0," +
                        std::to_string(scores.size()) + ")");
    const double ref = scores[static_cast<std::size_t>(label)];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (scores[j] > ref) ++rank;
        else if (scores[j] == ref && j < static_cast<std::size_t>(label)) ++rank;
    }
    return rank;
}

double topk_accuracy(const PredictionSet& ps, std::size_t k) {
    if (k == 0) throw ConfigError("topk_accuracy: k must be positive");
    ps.validate();
    if (!ps.has_labels()) throw DataError("topk_accuracy: predictions carry no labels");
    if (ps.size() == 0) throw DataError("topk_accuracy: empty prediction set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (rank_of_label(ps.scores[i], ps.labels[i]) < k) ++hits;
    return static_cast<double>(hits) / static_cast<double>(ps.size());
}

F1Result f1_scores(const std::vector<int>& truth, const std::vector<int>& predicted,
                   std::size_t num_classes) {
    if (truth.size() != predicted.size())
        throw DataError("f1: " + std::to_string(truth.size()) + " truth labels vs " +
                        std::to_string(predicted.size()) + " predictions");
    if (truth.empty()) throw DataError("f1: no samples");
    std::vector<long> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    std::vector<bool> present(num_classes, false);
    long correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int t = truth[i];
        const int p = predicted[i];
        if (t < 0 || static_cast<std::size_t>(t) >= num_classes || p < 0 ||
            static_cast<std::size_t>(p) >= num_classes)
            throw DataError("f1: label outside [0," + std::to_string(num_classes) + ")");
        present[static_cast<std::size_t>(t)] = true;
        present[static_cast<std::size_t>(p)] = true;
        if (t == p) {
            ++tp[static_cast<std::size_t>(t)];
            ++correct;
        } else {
            ++fn[static_cast<std::size_t>(t)];
            ++fp[static_cast<std::size_t>(p)];
        }
    }

    F1Result r;
    r.per_class.assign(num_classes, 0.0);
    double macro_sum = 0.0;
    std::size_t macro_n = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        const double denom_p = static_cast<double>(tp[k] + fp[k]);
        const double denom_r = static_cast<double>(tp[k] + fn[k]);
        const double prec = denom_p > 0.0 ? static_cast<double>(tp[k]) / denom_p : 0.0;
        const double rec = denom_r > 0.0 ? static_cast<double>(tp[k]) / denom_r : 0.0;
        r.per_class[k] = (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        if (present[k]) {
            macro_sum += r.per_class[k];
            ++macro_n;
        }
    }
    r.macro = macro_n > 0 ? macro_sum / static_cast<double>(macro_n) : 0.0;
    // Single-label micro precision and recall coincide with accuracy.
    r.micro = static_cast<double>(correct) / static_cast<double>(truth.size());
    return r;
}

MetricsReport compute_metrics(const PredictionSet& ps, const LabelTaxonomy& taxonomy) {
    ps.validate();
    taxonomy.validate();
    if (!ps.has_labels()) throw DataError("compute_metrics: predictions carry no labels");
    if (ps.size() == 0) throw DataError("compute_metrics: empty prediction set");
    if (ps.num_classes() != taxonomy.num_actions())
        throw DataError("compute_metrics: " + std::to_string(ps.num_classes()) +
                        " score columns vs " + std::to_string(taxonomy.num_actions()) +
                        " actions in taxonomy");

    std::vector<int> pred_action(ps.size());
    std::vector<int> truth_body(ps.size()), pred_body(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        pred_action[i] = static_cast<int>(argmax_score(ps.scores[i]));
        truth_body[i] =
            static_cast<int>(taxonomy.body_of_action[static_cast<std::size_t>(ps.labels[i])]);
        pred_body[i] =
            static_cast<int>(taxonomy.body_of_action[static_cast<std::size_t>(pred_action[i])]);
    }

    MetricsReport rep;
    rep.top1_action = topk_accuracy(ps, 1);
    rep.top5_action = topk_accuracy(ps, 5);
    F1Result action = f1_scores(ps.labels, pred_action, taxonomy.num_actions());
    F1Result body = f1_scores(truth_body, pred_body, taxonomy.num_bodies());
    std::size_t body_hits = 0;
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (truth_body[i] == pred_body[i]) ++body_hits;
    rep.top1_body = static_cast<double>(body_hits) / static_cast<double>(ps.size());
    rep.f1_macro_action = action.macro;
    rep.f1_micro_action = action.micro;
    rep.f1_macro_body = body.macro;
    rep.f1_micro_body = body.micro;
    rep.f1_mean =
        (rep.f1_macro_body + rep.f1_micro_body + rep.f1_macro_action + rep.f1_micro_action) / 4.0;
    rep.per_class_f1 = action.per_class;
    return rep;
}

namespace {

std::vector<double> softmax_row(const std::vector<double>& row) {
    std::vector<double> out(row.size());
    double m = row[0];
    for (double v : row) m = std::max(m, v);
    double z = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = std::exp(row[i] - m);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

} // namespace

PredictionSet ensemble_scores(const PredictionSet& a, const PredictionSet& b, double w) {
    if (w < 0.0 || w > 1.0)
        throw ConfigError("ensemble: weight must be in [0,1], got " + std::to_string(w));
    a.validate();
    b.validate();
    if (a.size() != b.size())
        throw DataError("ensemble: size mismatch (" + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
    if (a.num_classes() != b.num_classes())
        throw DataError("ensemble: class count mismatch");
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < b.size(); ++i) index[b.ids[i]] = i;

    PredictionSet out;
    out.ids = a.ids;
    if (a.has_labels()) out.labels = a.labels;
    out.scores.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto it = index.find(a.ids[i]);
        if (it == index.end())
            throw DataError("ensemble: id '" + a.ids[i] + "' missing from second set");
        const std::size_t j = it->second;
        if (a.has_labels() && b.has_labels() && a.labels[i] != b.labels[j])
            throw DataError("ensemble: conflicting labels for id '" + a.ids[i] + "'");
        std::vector<double> pa = softmax_row(a.scores[i]);
        std::vector<double> pb = softmax_row(b.scores[j]);
        std::vector<double> merged(pa.size());
        for (std::size_t k = 0; k < pa.size(); ++k) merged[k] = w * pa[k] + (1.0 - w) * pb[k];
        out.scores[i] = std::move(merged);
    }
    if (!a.has_labels() && b.has_labels()) {
        out.labels.resize(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) out.labels[i] = b.labels[index.at(a.ids[i])];
    }
    return out;
}

std::vector<std::vector<long>> confusion_matrix(const PredictionSet& ps) {
    ps.validate();
    if (!ps.has_labels()) throw DataError("confusion_matrix: predictions carry no labels");
    const std::size_t K = ps.num_classes();
    std::vector<std::vector<long>> counts(K, std::vector<long>(K, 0));
    for (std::size_t i = 0; i < ps.size(); ++i)
        ++counts[static_cast<std::size_t>(ps.labels[i])][argmax_score(ps.scores[i])];
    return counts;
}

void save_predictions(const std::string& path, const PredictionSet& ps) {
    ps.validate();
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open file for writing: " + path);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        ordered_json rec;
        rec["id"] = ps.ids[i];
        rec["scores"] = ps.scores[i];
        out << rec.dump() << "\n";
    }
    if (!out) throw ParseError("write failed: " + path);
}

PredictionSet load_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open predictions file: " + path);
    PredictionSet ps;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
            ps.ids.push_back(rec.at("id").get<std::string>());
            ps.scores.push_back(rec.at("scores").get<std::vector<double>>());
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    ps.validate();
    return ps;
}

void attach_labels(PredictionSet& ps, const Dataset& ds) {
    std::unordered_map<std::string, int> by_id;
    for (const SkeletonSequence& s : ds.samples) by_id[s.id] = s.label;
    ps.labels.resize(ps.ids.size());
    for (std::size_t i = 0; i < ps.ids.size(); ++i) {
        auto it = by_id.find(ps.ids[i]);
        if (it == by_id.end())
            throw DataError("predictions: id '" + ps.ids[i] + "' not found in dataset");
        ps.labels[i] = it->second;
    }
    ps.validate();
}

namespace {

double pct(double frac) { return std::round(frac * 10000.0) / 100.0; }

} // namespace

void write_report_json(const std::string& path, const MetricsReport& report) {
    ordered_json j;
    j["top1_action"] = pct(report.top1_action);
    j["top5_action"] = pct(report.top5_action);
    j["top1_body"] = pct(report.top1_body);
    j["f1_macro_action"] = pct(report.f1_macro_action);
    j["f1_micro_action"] = pct(report.f1_micro_action);
    j["f1_macro_body"] = pct(report.f1_macro_body);
    j["f1_micro_body"] = pct(report.f1_micro_body);
    j["f1_mean"] = pct(report.f1_mean);
    ordered_json raw;
    raw["top1_action"] = report.top1_action;
    raw["top5_action"] = report.top5_action;
    raw["top1_body"] = report.top1_body;
    raw["f1_macro_action"] = report.f1_macro_action;
    raw["f1_micro_action"] = report.f1_micro_action;
    raw["f1_macro_body"] = report.f1_macro_body;
    raw["f1_micro_body"] = report.f1_micro_body;
    raw["f1_mean"] = report.f1_mean;
    raw["per_class_f1"] = report.per_class_f1;
    j["raw"] = std::move(raw);
    j["convention"] =
        "headline numbers are percentages rounded to 2 decimals; 'raw' holds exact fractions; "
        "per-class F1 uses the 0/0 -> 0 rule and the macro average runs over classes present "
        "in truth or predictions";
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open file for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw ParseError("write failed: " + path);
}

void write_confusion_csv(const std::string& path, const std::vector<std::vector<long>>& counts,
                         const std::vector<std::string>& class_names) {
    if (counts.size() != class_names.size())
        throw DataError("confusion csv: " + std::to_string(counts.size()) + " rows vs " +
                        std::to_string(class_names.size()) + " class names");
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open file for writing: " + path);
    out << "true\\pred";
    for (const std::string& n : class_names) out << "," << n;
    out << "\n";
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i].size() != class_names.size())
            throw DataError("confusion csv: ragged count matrix");
        out << class_names[i];
        for (long c : counts[i]) out << "," << c;
        out << "\n";
    }
    if (!out) throw ParseError("write failed: " + path);
}

Dataset to_bone(const Dataset& ds, const std::vector<int>& parents) {
    ds.validate();
    if (parents.size() != ds.V)
        throw DataError("to_bone: " + std::to_string(parents.size()) + " parents for " +
                        std::to_string(ds.V) + " joints");
    for (std::size_t v = 0; v < parents.size(); ++v)
        if (parents[v] < 0 || static_cast<std::size_t>(parents[v]) >= ds.V)
            throw DataError("to_bone: parent of joint " + std::to_string(v) + " is " +
                            std::to_string(parents[v]) + ", outside [0," + std::to_string(ds.V) +
                            ")");
    // Every chain must reach a self-parented root within V hops.
    for (std::size_t v = 0; v < parents.size(); ++v) {
        std::size_t cur = v;
        std::size_t hops = 0;
        while (parents[cur] != static_cast<int>(cur)) {
            cur = static_cast<std::size_t>(parents[cur]);
            if (++hops > parents.size())
                throw ConfigError("to_bone: parent map contains a cycle through joint " +
                                  std::to_string(v));
        }
    }

    Dataset out = ds;
    for (SkeletonSequence& s : out.samples) {
        const FrameArray src = s.frames;
        for (std::size_t t = 0; t < src.T; ++t)
            for (std::size_t v = 0; v < src.V; ++v) {
                const std::size_t p = static_cast<std::size_t>(parents[v]);
                for (std::size_t c = 0; c < src.C; ++c)
                    s.frames.at(t, v, c) =
                        p == v ? 0.0 : src.at(t, v, c) - src.at(t, p, c);
            }
    }
    return out;
}

std::vector<int> load_parents(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open parents file: " + path);
    json j;
    try {
        in >> j;
        return j.at("parents").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

void save_parents(const std::string& path, const std::vector<int>& parents) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open file for writing: " + path);
    ordered_json j;
    j["parents"] = parents;
    out << j.dump() << "\n";
    if (!out) throw ParseError("write failed: " + path);
}

} // namespace mmn
