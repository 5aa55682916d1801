// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include "mgrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace mgrec {

using nlohmann::json;

namespace {

/// 1-based rank of the truth, or 0 when absent.
int rank_of_truth(const RankedPrediction& p) {
    for (std::size_t i = 0; i < p.candidates.size(); ++i) {
        if (p.candidates[i] == p.truth) return static_cast<int>(i) + 1;
    }
    return 0;
}

void require_nonempty(const std::vector<RankedPrediction>& preds, const char* who) {
    if (preds.empty()) throw Error(std::string(who) + ": no predictions");
}

}  // namespace

double hits_at_k(const std::vector<RankedPrediction>& preds, int k) {
    require_nonempty(preds, "hits_at_k");
    std::size_t hits = 0;
    for (const RankedPrediction& p : preds) {
        const int rank = rank_of_truth(p);
        if (rank > 0 && rank <= k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double ndcg_at_k(const std::vector<RankedPrediction>& preds, int k) {
    require_nonempty(preds, "ndcg_at_k");
    double total = 0.0;
    for (const RankedPrediction& p : preds) {
        const int rank = rank_of_truth(p);
        if (rank > 0 && rank <= k) total += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
    return total / static_cast<double>(preds.size());
}

double mrr(const std::vector<RankedPrediction>& preds) {
    require_nonempty(preds, "mrr");
    double total = 0.0;
    for (const RankedPrediction& p : preds) {
        const int rank = rank_of_truth(p);
        if (rank > 0) total += 1.0 / static_cast<double>(rank);
    }
    return total / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Adjusted mutual information
// ---------------------------------------------------------------------------

double ami(const std::vector<int>& labels_a, const std::vector<int>& labels_b) {
    if (labels_a.size() != labels_b.size()) throw Error("ami: label vectors differ in length");
    if (labels_a.empty()) throw Error("ami: empty labelings");
    const double n = static_cast<double>(labels_a.size());

    std::map<int, double> count_a, count_b;
    std::map<std::pair<int, int>, double> joint;
    for (std::size_t i = 0; i < labels_a.size(); ++i) {
        count_a[labels_a[i]] += 1.0;
        count_b[labels_b[i]] += 1.0;
        joint[{labels_a[i], labels_b[i]}] += 1.0;
    }

    double mi = 0.0;
    for (const auto& [cell, nij] : joint) {
        const double ai = count_a.at(cell.first);
        const double bj = count_b.at(cell.second);
        mi += (nij / n) * std::log(n * nij / (ai * bj));
    }
    double h_a = 0.0, h_b = 0.0;
    for (const auto& [label, c] : count_a) h_a -= (c / n) * std::log(c / n);
    for (const auto& [label, c] : count_b) h_b -= (c / n) * std::log(c / n);

    // Expected MI under the hypergeometric permutation model.
    const double lg_n = std::lgamma(n + 1.0);
    double emi = 0.0;
    for (const auto& [la, ai] : count_a) {
        for (const auto& [lb, bj] : count_b) {
            const double lo = std::max(1.0, ai + bj - n);
            const double hi = std::min(ai, bj);
            for (double nij = lo; nij <= hi; nij += 1.0) {
                const double log_term = std::log(n * nij / (ai * bj));
                const double log_weight =
                    std::lgamma(ai + 1.0) + std::lgamma(bj + 1.0) + std::lgamma(n - ai + 1.0) +
                    std::lgamma(n - bj + 1.0) - lg_n - std::lgamma(nij + 1.0) -
                    std::lgamma(ai - nij + 1.0) - std::lgamma(bj - nij + 1.0) -
                    std::lgamma(n - ai - bj + nij + 1.0);
                emi += (nij / n) * log_term * std::exp(log_weight);
            }
        }
    }

    const double denom = 0.5 * (h_a + h_b) - emi;
    if (std::abs(denom) < 1e-12) return 0.0;
    return (mi - emi) / denom;
}

std::vector<int> first_level_labels(const SemanticIdMap& map) {
    std::vector<int> labels;
    labels.reserve(map.entries.size());
    for (const auto& [id, entry] : map.entries) {
        if (entry.codes.empty()) throw Error("first_level_labels: item '" + id + "' has no codes");
        labels.push_back(entry.codes[0]);
    }
    return labels;
}

std::vector<int> first_level_labels(const SemanticIdMap& map,
                                    const std::vector<std::string>& items) {
    std::vector<int> labels;
    labels.reserve(items.size());
    for (const std::string& id : items) {
        const auto it = map.entries.find(id);
        if (it == map.entries.end()) {
            throw Error("first_level_labels: item '" + id + "' missing from sidmap '" +
                        map.modality + "'");
        }
        if (it->second.codes.empty()) {
            throw Error("first_level_labels: item '" + id + "' has no codes");
        }
        labels.push_back(it->second.codes[0]);
    }
    return labels;
}

// ---------------------------------------------------------------------------
// Overlap and partial hits
// ---------------------------------------------------------------------------

double prediction_overlap(const std::vector<RankedPrediction>& preds_a,
                          const std::vector<RankedPrediction>& preds_b, OverlapMode mode, int k) {
    require_nonempty(preds_a, "prediction_overlap");
    if (preds_a.size() != preds_b.size()) {
        throw Error("prediction_overlap: prediction sets differ in size");
    }
    std::map<std::string, const RankedPrediction*> by_user;
    for (const RankedPrediction& p : preds_b) by_user[p.user] = &p;

    std::size_t agree = 0;
    for (const RankedPrediction& pa : preds_a) {
        const auto it = by_user.find(pa.user);
        if (it == by_user.end()) {
            throw Error("prediction_overlap: user '" + pa.user + "' missing from second set");
        }
        const RankedPrediction& pb = *it->second;
        if (mode == OverlapMode::kHits) {
            const int ra = rank_of_truth(pa);
            const int rb = rank_of_truth(pb);
            const bool hit_a = ra > 0 && ra <= k;
            const bool hit_b = rb > 0 && rb <= k;
            if (hit_a == hit_b) ++agree;
        } else {
            const bool both_empty = pa.candidates.empty() && pb.candidates.empty();
            if (both_empty || (!pa.candidates.empty() && !pb.candidates.empty() &&
                               pa.candidates.front() == pb.candidates.front())) {
                ++agree;
            }
        }
    }
    return static_cast<double>(agree) / static_cast<double>(preds_a.size());
}

double partial_hits(const std::vector<RankedPrediction>& preds, const SemanticIdMap& slice_map,
                    int k) {
    require_nonempty(preds, "partial_hits");
    std::size_t hits = 0;
    for (const RankedPrediction& p : preds) {
        const auto truth_it = slice_map.entries.find(p.truth);
        if (truth_it == slice_map.entries.end()) continue;  // unknown truth: counted as a miss
        // Codeword-level comparison: the collision suffix is bookkeeping, not
        // content, and including it would collapse slice hits into full hits.
        const std::vector<int>& truth_codes = truth_it->second.codes;
        const int limit = std::min<int>(k, static_cast<int>(p.candidates.size()));
        for (int i = 0; i < limit; ++i) {
            const auto it = slice_map.entries.find(p.candidates[static_cast<std::size_t>(i)]);
            if (it != slice_map.entries.end() && it->second.codes == truth_codes) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

void save_predictions(const std::vector<RankedPrediction>& preds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write predictions: " + path);
    for (const RankedPrediction& p : preds) {
        json rec;
        rec["user_id"] = p.user;
        rec["candidates"] = p.candidates;
        rec["truth"] = p.truth;
        out << rec.dump() << '\n';
    }
}

std::vector<RankedPrediction> load_predictions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open predictions: " + path);
    std::vector<RankedPrediction> preds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": malformed record");
        }
        RankedPrediction p;
        p.user = rec.at("user_id").get<std::string>();
        p.candidates = rec.at("candidates").get<std::vector<std::string>>();
        p.truth = rec.at("truth").get<std::string>();
        preds.push_back(std::move(p));
    }
    return preds;
}

}  // namespace mgrec
