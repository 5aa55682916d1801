// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mgrec/formats.hpp"

namespace mgrec {

/// Synthetic catalog/interaction generator. Items carry one cluster label per
/// modality, drawn independently, so the modalities hold complementary
/// information. User histories follow a Markov walk that copies the previous
/// item's image cluster with probability alpha and its text cluster otherwise.
struct SynthConfig {
    int n_items = 2000;
    int n_users = 500;
    std::map<std::string, int> dims = {{"img", 32}, {"txt", 32}};
    std::map<std::string, int> clusters_per_modality = {{"img", 8}, {"txt", 8}};
    double noise_sigma = 0.1;
    std::map<std::string, double> dominance_scale = {{"img", 1.0}, {"txt", 1.0}};
    int history_min = 8;
    int history_max = 20;
    double alpha = 0.5;  // preference mixing: P(follow image cluster)
    std::string text_modality = "txt";
    std::string image_modality = "img";
    std::uint64_t seed = 7;

    void validate() const;
};

struct SynthItems {
    std::map<std::string, EmbeddingTable> tables;
    LabelMap labels;  // modality -> item -> cluster
};

/// Draws cluster centroids (unit-norm Gaussian directions), assigns each item
/// an independent label per modality and emits centroid + noise vectors scaled
/// by the modality's dominance factor. Pure function of (config, seed).
SynthItems gen_items(const SynthConfig& config);

InteractionDataset gen_interactions(const SynthConfig& config, const LabelMap& labels);

}  // namespace mgrec
