// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "mgrec/formats.hpp"

namespace mgrec {

/// One user's ranked beam output against the held-out truth.
struct RankedPrediction {
    std::string user;
    std::vector<std::string> candidates;  // unique item ids, best first
    std::string truth;
};

/// Fraction of predictions whose truth appears in the top k.
double hits_at_k(const std::vector<RankedPrediction>& preds, int k = 5);

/// Binary-relevance NDCG with a single relevant item: DCG = 1/log2(rank+1)
/// within the cutoff, IDCG = 1.
double ndcg_at_k(const std::vector<RankedPrediction>& preds, int k = 5);

/// Mean reciprocal rank; truth outside the candidate list contributes 0.
double mrr(const std::vector<RankedPrediction>& preds);

/// Adjusted mutual information with the exact hypergeometric expected-MI term
/// and the arithmetic-mean entropy normalizer. Defined as 0 when the
/// normalizer is degenerate (e.g. two constant labelings).
double ami(const std::vector<int>& labels_a, const std::vector<int>& labels_b);

/// Per-item first-level codeword, items in ascending id order.
std::vector<int> first_level_labels(const SemanticIdMap& map);
std::vector<int> first_level_labels(const SemanticIdMap& map,
                                    const std::vector<std::string>& items);

enum class OverlapMode { kHits, kTop1 };

/// kHits: fraction of users where both systems hit the truth in their top k
/// or both miss. kTop1: fraction of users with identical top-1 items.
double prediction_overlap(const std::vector<RankedPrediction>& preds_a,
                          const std::vector<RankedPrediction>& preds_b, OverlapMode mode,
                          int k = 5);

/// Hits@k counting a candidate as relevant when its semantic ID in the given
/// modality equals the truth's (codes and suffix), other modalities ignored.
double partial_hits(const std::vector<RankedPrediction>& preds, const SemanticIdMap& slice_map,
                    int k = 5);

void save_predictions(const std::vector<RankedPrediction>& preds, const std::string& path);
std::vector<RankedPrediction> load_predictions(const std::string& path);

}  // namespace mgrec
