// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include "mgrec/synth.hpp"

#include <algorithm>
#include <cmath>

#include "mgrec/rng.hpp"

namespace mgrec {

namespace {

std::string padded_id(char prefix, int index, int total) {
    int width = 1;
    for (int v = total - 1; v >= 10; v /= 10) ++width;
    std::string digits = std::to_string(index);
    return prefix + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(width, digits.size()), '0') + digits;
}

}  // namespace

void SynthConfig::validate() const {
    if (n_items < 1 || n_users < 1) throw ConfigError("synth: n_items and n_users must be >= 1");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("synth: alpha must be in [0, 1]");
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (history_min < 3 || history_max < history_min) {
        throw ConfigError("synth: history length range must satisfy 3 <= min <= max");
    }
    if (dims.empty()) throw ConfigError("synth: at least one modality required");
    for (const auto& [mod, dim] : dims) {
        if (dim < 1) throw ConfigError("synth: dim for '" + mod + "' must be >= 1");
        const auto it = clusters_per_modality.find(mod);
        if (it == clusters_per_modality.end() || it->second < 2) {
            throw ConfigError("synth: modality '" + mod + "' needs >= 2 clusters");
        }
    }
}

SynthItems gen_items(const SynthConfig& config) {
    config.validate();
    const std::uint64_t items_seed = Rng::splitmix64(config.seed ^ 0xA11CE5ULL);

    SynthItems out;
    std::uint64_t modality_index = 0;
    for (const auto& [mod, dim] : config.dims) {
        Rng rng = Rng::derive(items_seed, modality_index++);
        const int n_clusters = config.clusters_per_modality.at(mod);
        const double scale = config.dominance_scale.count(mod) ? config.dominance_scale.at(mod) : 1.0;

        // Unit-norm centroids keep cluster separation governed by noise_sigma.
        Matrix centroids(n_clusters, dim);
        for (int c = 0; c < n_clusters; ++c) {
            for (int d = 0; d < dim; ++d) centroids(c, d) = rng.normal();
            const double norm = centroids.row(c).norm();
            if (norm > 0) centroids.row(c) /= norm;
        }

        EmbeddingTable table;
        table.modality = mod;
        table.dim = dim;
        auto& mod_labels = out.labels[mod];
        for (int i = 0; i < config.n_items; ++i) {
            const std::string id = padded_id('i', i, config.n_items);
            const int cluster = static_cast<int>(rng.uniform_index(n_clusters));
            mod_labels[id] = cluster;
            VectorF v(dim);
            for (int d = 0; d < dim; ++d) {
                v[d] = static_cast<float>(scale *
                                          (centroids(cluster, d) + config.noise_sigma * rng.normal()));
            }
            table.rows.emplace(id, std::move(v));
        }
        out.tables.emplace(mod, std::move(table));
    }
    return out;
}

InteractionDataset gen_interactions(const SynthConfig& config, const LabelMap& labels) {
    config.validate();
    const auto txt_it = labels.find(config.text_modality);
    const auto img_it = labels.find(config.image_modality);
    if (txt_it == labels.end() || img_it == labels.end()) {
        throw ConfigError("gen_interactions: labels must cover modalities '" +
                          config.text_modality + "' and '" + config.image_modality + "'");
    }
    const auto& txt_labels = txt_it->second;
    const auto& img_labels = img_it->second;

    // cluster -> items, items ascending by id.
    std::map<int, std::vector<std::string>> txt_members;
    std::map<int, std::vector<std::string>> img_members;
    std::vector<std::string> all_items;
    for (const auto& [id, c] : txt_labels) {
        txt_members[c].push_back(id);
        all_items.push_back(id);
    }
    for (const auto& [id, c] : img_labels) img_members[c].push_back(id);
    if (all_items.empty()) throw ConfigError("gen_interactions: empty label map");

    for (int c = 0; c < config.clusters_per_modality.at(config.text_modality); ++c) {
        if (!txt_members.count(c) || txt_members.at(c).empty()) {
            throw ConfigError("gen_interactions: text cluster " + std::to_string(c) +
                              " has no items");
        }
    }
    for (int c = 0; c < config.clusters_per_modality.at(config.image_modality); ++c) {
        if (!img_members.count(c) || img_members.at(c).empty()) {
            throw ConfigError("gen_interactions: image cluster " + std::to_string(c) +
                              " has no items");
        }
    }

    const std::uint64_t users_seed = Rng::splitmix64(config.seed ^ 0x0DDB1A5ULL);

    InteractionDataset data;
    for (int u = 0; u < config.n_users; ++u) {
        Rng rng = Rng::derive(users_seed, static_cast<std::uint64_t>(u));
        const int length = config.history_min +
                           static_cast<int>(rng.uniform_index(
                               static_cast<std::uint64_t>(config.history_max - config.history_min + 1)));
        std::vector<std::string> hist;
        std::vector<double> ts;
        hist.reserve(length);
        std::string current = all_items[rng.uniform_index(all_items.size())];
        hist.push_back(current);
        ts.push_back(0.0);
        for (int t = 1; t < length; ++t) {
            const bool follow_image = rng.bernoulli(config.alpha);
            const auto& pool = follow_image ? img_members.at(img_labels.at(current))
                                            : txt_members.at(txt_labels.at(current));
            current = pool[rng.uniform_index(pool.size())];
            hist.push_back(current);
            ts.push_back(static_cast<double>(t));
        }
        const std::string uid = padded_id('u', u, config.n_users);
        data.histories.emplace(uid, std::move(hist));
        data.timestamps.emplace(uid, std::move(ts));
    }
    return data;
}

}  // namespace mgrec
