// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mgrec/eval.hpp"
#include "mgrec/quant.hpp"
#include "mgrec/seqrec.hpp"
#include "mgrec/sid.hpp"
#include "mgrec/synth.hpp"

namespace mgrec {

struct EvalOptions {
    int beam_width = 20;
    int k = 5;
    bool constrained = true;
};

/// One experiment: config-driven synth -> quantize -> train -> eval -> report.
/// Every cell (strategy, seed) reseeds synth, quantizer and model from the
/// cell seed, so multi-seed means cover data and training variation.
struct ExperimentConfig {
    std::string name = "default";
    std::string data_dir = "data";
    std::string out_dir = "out";
    SynthConfig synth;
    QuantConfig quant;
    std::map<std::string, QuantConfig> quant_overrides;  // per-modality, optional
    std::map<std::string, double> fusion_scales = {{"img", 1.0}, {"txt", 1.0}};
    std::vector<std::string> strategies = {"txt", "img", "ef", "lf", "lfpp"};
    ModelConfig model;
    TrainSchedule schedule;
    EvalOptions eval;
    std::vector<std::uint64_t> seeds = {7};
    int min_interactions = 5;
    bool filter_items = false;  // synthetic catalogs are item-sparse
    int max_history_items = 20;
    SuffixPolicy suffix_policy = SuffixPolicy::kAlways;
    bool align_train_items_only = false;  // alignment covers the whole catalog by default

    void validate() const;
};

ExperimentConfig default_config();
ExperimentConfig config_from_text(const std::string& json_text,
                                  const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides = {});
std::string config_to_json_text(const ExperimentConfig& config);

struct StrategySpec {
    std::string name;
    FusionStrategy fusion;
};

/// "ef" / "lf" / "lfpp" are the canonical strategies; any modality name from
/// the synth config acts as a unimodal baseline (single modality, LF
/// assembly).
StrategySpec parse_strategy(const std::string& name, const ExperimentConfig& config);

// Filesystem layout helpers.
std::string data_dir_for_seed(const ExperimentConfig& config, std::uint64_t seed);
std::string cell_dir(const ExperimentConfig& config, const std::string& strategy,
                     std::uint64_t seed);
std::string experiment_dir(const ExperimentConfig& config);

// Commands. Each validates its inputs (failing with a remediation hint),
// skips work whose outputs are already up to date unless `force` is set, and
// produces byte-identical artifacts for identical (config, seed).
void cmd_synth(const ExperimentConfig& config, bool force);
void cmd_quantize(const ExperimentConfig& config, bool force);
void cmd_train(const ExperimentConfig& config, const std::string& strategy, bool force,
               bool verbose = false);
void cmd_eval(const ExperimentConfig& config, const std::string& strategy, bool force,
              bool unconstrained = false);
void cmd_report(const ExperimentConfig& config);
void cmd_ablate(const ExperimentConfig& config, const std::string& axis, bool force,
                bool verbose = false);

/// Convenience: synth + quantize + train + eval for every configured strategy,
/// then the merged report.
void run_pipeline(const ExperimentConfig& config, bool force, bool verbose = false);

/// Teacher-forced argmax accuracy per target position over the given examples.
std::vector<double> position_accuracy(const Seq2SeqModel& model,
                                      const std::vector<SequenceExample>& examples);

}  // namespace mgrec
