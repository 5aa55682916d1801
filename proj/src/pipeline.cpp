// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include "mgrec/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mgrec {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void synth_from_json(const json& j, SynthConfig& c) {
    maybe(j, "n_items", c.n_items);
    maybe(j, "n_users", c.n_users);
    maybe(j, "dims", c.dims);
    maybe(j, "clusters_per_modality", c.clusters_per_modality);
    maybe(j, "noise_sigma", c.noise_sigma);
    maybe(j, "dominance_scale", c.dominance_scale);
    if (j.contains("history_length_range")) {
        const auto range = j.at("history_length_range").get<std::vector<int>>();
        if (range.size() != 2) throw ConfigError("history_length_range must be [min, max]");
        c.history_min = range[0];
        c.history_max = range[1];
    }
    maybe(j, "alpha", c.alpha);
    maybe(j, "text_modality", c.text_modality);
    maybe(j, "image_modality", c.image_modality);
    maybe(j, "seed", c.seed);
}

json synth_to_json(const SynthConfig& c) {
    json j;
    j["n_items"] = c.n_items;
    j["n_users"] = c.n_users;
    j["dims"] = c.dims;
    j["clusters_per_modality"] = c.clusters_per_modality;
    j["noise_sigma"] = c.noise_sigma;
    j["dominance_scale"] = c.dominance_scale;
    j["history_length_range"] = {c.history_min, c.history_max};
    j["alpha"] = c.alpha;
    j["text_modality"] = c.text_modality;
    j["image_modality"] = c.image_modality;
    j["seed"] = c.seed;
    return j;
}

void quant_from_json(const json& j, QuantConfig& c) {
    maybe(j, "levels", c.levels);
    maybe(j, "codebook_size", c.codebook_size);
    if (j.contains("backend")) c.backend = quant_backend_from_string(j.at("backend"));
    maybe(j, "kmeans_iters", c.kmeans_iters);
    if (j.contains("vae")) {
        const json& v = j.at("vae");
        maybe(v, "latent_dim", c.vae.latent_dim);
        maybe(v, "hidden", c.vae.hidden);
        maybe(v, "beta", c.vae.beta);
        maybe(v, "lr", c.vae.lr);
        maybe(v, "steps", c.vae.steps);
        maybe(v, "batch_size", c.vae.batch_size);
        maybe(v, "dead_steps", c.vae.dead_steps);
    }
    maybe(j, "seed", c.seed);
}

json quant_to_json(const QuantConfig& c) {
    json j;
    j["levels"] = c.levels;
    j["codebook_size"] = c.codebook_size;
    j["backend"] = to_string(c.backend);
    j["kmeans_iters"] = c.kmeans_iters;
    j["vae"] = {{"latent_dim", c.vae.latent_dim}, {"hidden", c.vae.hidden},
                {"beta", c.vae.beta},             {"lr", c.vae.lr},
                {"steps", c.vae.steps},           {"batch_size", c.vae.batch_size},
                {"dead_steps", c.vae.dead_steps}};
    j["seed"] = c.seed;
    return j;
}

void model_from_json(const json& j, ModelConfig& c) {
    maybe(j, "enc_layers", c.enc_layers);
    maybe(j, "dec_layers", c.dec_layers);
    maybe(j, "heads", c.heads);
    maybe(j, "width", c.width);
    maybe(j, "ff", c.ff);
    maybe(j, "dropout", c.dropout);
    maybe(j, "max_source_len", c.max_source_len);
    maybe(j, "max_target_len", c.max_target_len);
    maybe(j, "seed", c.seed);
}

json model_to_json(const ModelConfig& c) {
    json j;
    j["enc_layers"] = c.enc_layers;
    j["dec_layers"] = c.dec_layers;
    j["heads"] = c.heads;
    j["width"] = c.width;
    j["ff"] = c.ff;
    j["dropout"] = c.dropout;
    j["max_source_len"] = c.max_source_len;
    j["max_target_len"] = c.max_target_len;
    j["seed"] = c.seed;
    return j;
}

void schedule_from_json(const json& j, TrainSchedule& c) {
    maybe(j, "align_steps", c.align_steps);
    maybe(j, "rec_steps", c.rec_steps);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "align_batch_size", c.align_batch_size);
    maybe(j, "lr", c.lr);
    maybe(j, "align_lr", c.align_lr);
    maybe(j, "warmup_steps", c.warmup_steps);
    maybe(j, "weight_decay", c.weight_decay);
    maybe(j, "mix", c.mix);
    maybe(j, "seed", c.seed);
}

json schedule_to_json(const TrainSchedule& c) {
    json j;
    j["align_steps"] = c.align_steps;
    j["rec_steps"] = c.rec_steps;
    j["batch_size"] = c.batch_size;
    j["align_batch_size"] = c.align_batch_size;
    j["lr"] = c.lr;
    j["align_lr"] = c.align_lr;
    j["warmup_steps"] = c.warmup_steps;
    j["weight_decay"] = c.weight_decay;
    j["mix"] = c.mix;
    j["seed"] = c.seed;
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    maybe(j, "name", c.name);
    maybe(j, "data_dir", c.data_dir);
    maybe(j, "out_dir", c.out_dir);
    if (j.contains("synth")) synth_from_json(j.at("synth"), c.synth);
    if (j.contains("quant")) quant_from_json(j.at("quant"), c.quant);
    if (j.contains("quant_overrides")) {
        for (const auto& [mod, sub] : j.at("quant_overrides").items()) {
            QuantConfig qc = c.quant;
            quant_from_json(sub, qc);
            c.quant_overrides[mod] = qc;
        }
    }
    maybe(j, "fusion_scales", c.fusion_scales);
    maybe(j, "strategies", c.strategies);
    if (j.contains("model")) model_from_json(j.at("model"), c.model);
    if (j.contains("schedule")) schedule_from_json(j.at("schedule"), c.schedule);
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        maybe(e, "beam_width", c.eval.beam_width);
        maybe(e, "k", c.eval.k);
        maybe(e, "constrained", c.eval.constrained);
    }
    maybe(j, "seeds", c.seeds);
    maybe(j, "min_interactions", c.min_interactions);
    maybe(j, "filter_items", c.filter_items);
    maybe(j, "max_history_items", c.max_history_items);
    if (j.contains("suffix_policy")) {
        const std::string p = j.at("suffix_policy").get<std::string>();
        if (p == "always") {
            c.suffix_policy = SuffixPolicy::kAlways;
        } else if (p == "omit-unambiguous") {
            c.suffix_policy = SuffixPolicy::kOmitUnambiguous;
        } else {
            throw ConfigError("unknown suffix_policy '" + p + "'");
        }
    }
    maybe(j, "align_train_items_only", c.align_train_items_only);
    return c;
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["name"] = c.name;
    j["data_dir"] = c.data_dir;
    j["out_dir"] = c.out_dir;
    j["synth"] = synth_to_json(c.synth);
    j["quant"] = quant_to_json(c.quant);
    json overrides = json::object();
    for (const auto& [mod, qc] : c.quant_overrides) overrides[mod] = quant_to_json(qc);
    j["quant_overrides"] = std::move(overrides);
    j["fusion_scales"] = c.fusion_scales;
    j["strategies"] = c.strategies;
    j["model"] = model_to_json(c.model);
    j["schedule"] = schedule_to_json(c.schedule);
    j["eval"] = {{"beam_width", c.eval.beam_width},
                 {"k", c.eval.k},
                 {"constrained", c.eval.constrained}};
    j["seeds"] = c.seeds;
    j["min_interactions"] = c.min_interactions;
    j["filter_items"] = c.filter_items;
    j["max_history_items"] = c.max_history_items;
    j["suffix_policy"] =
        c.suffix_policy == SuffixPolicy::kAlways ? "always" : "omit-unambiguous";
    j["align_train_items_only"] = c.align_train_items_only;
    return j;
}

json parse_json_text(const std::string& text, const std::string& what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("malformed config " + what);
    return j;
}

void apply_override(json& j, const std::string& entry) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key.path=value, got '" + entry + "'");
    const std::string path = entry.substr(0, eq);
    const std::string value = entry.substr(eq + 1);
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;  // plain string

    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("--set has an empty path segment: '" + entry + "'");
        if (dot == std::string::npos) {
            (*node)[key] = std::move(parsed);
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    synth.validate();
    quant.validate();
    for (const auto& [mod, qc] : quant_overrides) qc.validate();
    schedule.validate();
    if (strategies.empty()) throw ConfigError("config: strategies must be nonempty");
    if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
    if (eval.beam_width < 1 || eval.k < 1) throw ConfigError("config: invalid eval options");
    if (max_history_items < 1) throw ConfigError("config: max_history_items must be >= 1");
    for (const std::string& s : strategies) parse_strategy(s, *this);
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig config_from_text(const std::string& json_text,
                                  const std::vector<std::string>& overrides) {
    json j = parse_json_text(json_text, "text");
    for (const std::string& entry : overrides) apply_override(j, entry);
    ExperimentConfig c = config_from_json(j);
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_text(ss.str(), overrides);
}

std::string config_to_json_text(const ExperimentConfig& config) {
    return config_to_json(config).dump(2);
}

StrategySpec parse_strategy(const std::string& name, const ExperimentConfig& config) {
    StrategySpec spec;
    spec.name = name;
    const std::string txt = config.synth.text_modality;
    const std::string img = config.synth.image_modality;
    if (name == "ef") {
        spec.fusion.kind = FusionKind::kEarly;
        spec.fusion.modalities = {"fused"};
    } else if (name == "lf") {
        spec.fusion.kind = FusionKind::kLate;
        spec.fusion.modalities = {txt, img};
    } else if (name == "lfpp") {
        spec.fusion.kind = FusionKind::kLatePlus;
        spec.fusion.modalities = {txt, img};
    } else if (config.synth.dims.count(name)) {
        spec.fusion.kind = FusionKind::kLate;  // unimodal baseline, LF assembly
        spec.fusion.modalities = {name};
    } else {
        throw ConfigError("unknown strategy '" + name +
                          "' (expected ef, lf, lfpp or a modality name)");
    }
    spec.fusion.validate();
    return spec;
}

// ---------------------------------------------------------------------------
// Layout and stamps
// ---------------------------------------------------------------------------

std::string data_dir_for_seed(const ExperimentConfig& config, std::uint64_t seed) {
    return config.data_dir + "/" + std::to_string(seed);
}

std::string experiment_dir(const ExperimentConfig& config) {
    return config.out_dir + "/" + config.name;
}

std::string cell_dir(const ExperimentConfig& config, const std::string& strategy,
                     std::uint64_t seed) {
    return experiment_dir(config) + "/" + strategy + "/" + std::to_string(seed);
}

namespace {

std::string stamp_hash(const std::string& text) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", io::crc32(text.data(), text.size()));
    return buf;
}

bool stamp_matches(const std::string& dir, const std::string& stage, const std::string& text) {
    std::ifstream in(dir + "/.stamp-" + stage);
    if (!in) return false;
    std::string existing;
    std::getline(in, existing);
    return existing == stamp_hash(text);
}

void write_stamp(const std::string& dir, const std::string& stage, const std::string& text) {
    std::ofstream out(dir + "/.stamp-" + stage);
    out << stamp_hash(text) << '\n';
}

std::string synth_stage_text(const ExperimentConfig& config, std::uint64_t seed) {
    json j = synth_to_json(config.synth);
    j["seed"] = seed;
    return j.dump();
}

QuantConfig quant_config_for(const ExperimentConfig& config, const std::string& modality,
                             std::uint64_t seed) {
    QuantConfig qc = config.quant;
    const auto it = config.quant_overrides.find(modality);
    if (it != config.quant_overrides.end()) qc = it->second;
    qc.seed = seed;
    return qc;
}

std::string quantize_stage_text(const ExperimentConfig& config, const std::string& strategy,
                                std::uint64_t seed) {
    json j;
    j["synth"] = parse_json_text(synth_stage_text(config, seed), "stamp");
    j["quant"] = quant_to_json(config.quant);
    json overrides = json::object();
    for (const auto& [mod, qc] : config.quant_overrides) overrides[mod] = quant_to_json(qc);
    j["quant_overrides"] = std::move(overrides);
    j["fusion_scales"] = config.fusion_scales;
    j["strategy"] = strategy;
    j["seed"] = seed;
    return j.dump();
}

std::string train_stage_text(const ExperimentConfig& config, const std::string& strategy,
                             std::uint64_t seed) {
    json j;
    j["quantize"] = parse_json_text(quantize_stage_text(config, strategy, seed), "stamp");
    j["model"] = model_to_json(config.model);
    j["schedule"] = schedule_to_json(config.schedule);
    j["min_interactions"] = config.min_interactions;
    j["filter_items"] = config.filter_items;
    j["max_history_items"] = config.max_history_items;
    j["suffix_policy"] = config.suffix_policy == SuffixPolicy::kAlways ? "always" : "omit";
    j["align_train_items_only"] = config.align_train_items_only;
    return j.dump();
}

std::string eval_stage_text(const ExperimentConfig& config, const std::string& strategy,
                            std::uint64_t seed, bool constrained) {
    json j;
    j["train"] = parse_json_text(train_stage_text(config, strategy, seed), "stamp");
    j["beam_width"] = config.eval.beam_width;
    j["k"] = config.eval.k;
    j["constrained"] = constrained;
    return j.dump();
}

std::vector<std::string> fused_input_modalities(const ExperimentConfig& config) {
    std::vector<std::string> mods = {config.synth.text_modality, config.synth.image_modality};
    for (const auto& [mod, dim] : config.synth.dims) {
        if (mod != config.synth.text_modality && mod != config.synth.image_modality) {
            mods.push_back(mod);
        }
    }
    return mods;
}

void require_file(const std::string& path, const std::string& hint) {
    if (!fs::exists(path)) throw Error("missing input '" + path + "'; " + hint);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_synth(const ExperimentConfig& config, bool force) {
    config.validate();
    for (const std::uint64_t seed : config.seeds) {
        const std::string dir = data_dir_for_seed(config, seed);
        const std::string stage_text = synth_stage_text(config, seed);
        if (!force && stamp_matches(dir, "synth", stage_text) &&
            fs::exists(dir + "/embeddings.jsonl")) {
            continue;
        }
        fs::create_directories(dir);
        SynthConfig sc = config.synth;
        sc.seed = seed;
        const SynthItems items = gen_items(sc);
        const InteractionDataset interactions = gen_interactions(sc, items.labels);

        std::vector<const EmbeddingTable*> tables;
        for (const auto& [mod, table] : items.tables) tables.push_back(&table);
        save_embeddings(tables, dir + "/embeddings.jsonl");
        save_interactions(interactions, dir + "/interactions.jsonl");
        save_labels(items.labels, dir + "/labels.jsonl");
        write_stamp(dir, "synth", stage_text);
    }
}

void cmd_quantize(const ExperimentConfig& config, bool force) {
    config.validate();
    for (const std::uint64_t seed : config.seeds) {
        const std::string data = data_dir_for_seed(config, seed);
        require_file(data + "/embeddings.jsonl", "run the synth command first");

        // Which cells need refreshing, and which modalities feed them.
        std::vector<std::pair<std::string, StrategySpec>> pending;
        std::set<std::string> needed;
        for (const std::string& name : config.strategies) {
            const StrategySpec spec = parse_strategy(name, config);
            const std::string cell = cell_dir(config, name, seed);
            const std::string stage_text = quantize_stage_text(config, name, seed);
            if (!force && stamp_matches(cell, "quantize", stage_text)) continue;
            pending.emplace_back(name, spec);
            for (const std::string& mod : spec.fusion.modalities) needed.insert(mod);
        }
        if (pending.empty()) continue;

        std::map<std::string, EmbeddingTable> cached_tables;
        auto table_for = [&](const std::string& mod) -> const EmbeddingTable& {
            auto it = cached_tables.find(mod);
            if (it != cached_tables.end()) return it->second;
            if (mod == "fused") {
                std::vector<const EmbeddingTable*> inputs;
                for (const std::string& m : fused_input_modalities(config)) {
                    auto sub = cached_tables.find(m);
                    if (sub == cached_tables.end()) {
                        sub = cached_tables
                                  .emplace(m, load_embeddings(data + "/embeddings.jsonl", m))
                                  .first;
                    }
                    inputs.push_back(&sub->second);
                }
                return cached_tables
                    .emplace("fused", fuse_embeddings(inputs, config.fusion_scales))
                    .first->second;
            }
            return cached_tables.emplace(mod, load_embeddings(data + "/embeddings.jsonl", mod))
                .first->second;
        };

        std::map<std::string, TrainedQuantizer> quantizers;
        std::map<std::string, SemanticIdMap> sidmaps;
        for (const std::string& mod : needed) {
            const EmbeddingTable& table = table_for(mod);
            const QuantConfig qc = quant_config_for(config, mod, seed);
            TrainedQuantizer q = train_quantizer(table, qc);
            sidmaps[mod] = assign_ids(q, table);
            quantizers[mod] = std::move(q);
        }

        for (const auto& [name, spec] : pending) {
            const std::string cell = cell_dir(config, name, seed);
            fs::create_directories(cell + "/sidmaps");
            fs::create_directories(cell + "/checkpoints");
            for (const std::string& mod : spec.fusion.modalities) {
                save_sidmap(sidmaps.at(mod), cell + "/sidmaps/" + mod + ".jsonl");
                save_quantizer(quantizers.at(mod), cell + "/checkpoints/quantizer_" + mod + ".ckpt");
            }
            write_stamp(cell, "quantize", quantize_stage_text(config, name, seed));
        }
    }
}

namespace {

struct CellInputs {
    StrategySpec spec;
    std::map<std::string, SemanticIdMap> sidmaps;
    SidMapsByModality map_ptrs;
    InteractionDataset interactions;
    TokenVocab vocab;
};

CellInputs load_cell_inputs(const ExperimentConfig& config, const std::string& strategy,
                            std::uint64_t seed) {
    CellInputs in;
    in.spec = parse_strategy(strategy, config);
    const std::string cell = cell_dir(config, strategy, seed);
    const std::string data = data_dir_for_seed(config, seed);
    require_file(data + "/interactions.jsonl", "run the synth command first");

    for (const std::string& mod : in.spec.fusion.modalities) {
        const std::string path = cell + "/sidmaps/" + mod + ".jsonl";
        require_file(path, "run the quantize command first");
        const QuantConfig qc = quant_config_for(config, mod, seed);
        in.sidmaps[mod] = load_sidmap(path, mod, qc.codebook_size);
    }
    for (const auto& [mod, map] : in.sidmaps) in.map_ptrs[mod] = &map;

    in.interactions = split_leave_last_out(load_interactions(
        data + "/interactions.jsonl", config.min_interactions, config.filter_items));

    std::vector<const SemanticIdMap*> ordered;
    for (const std::string& mod : in.spec.fusion.modalities) ordered.push_back(&in.sidmaps.at(mod));
    in.vocab = TokenVocab::build(ordered);
    return in;
}

}  // namespace

void cmd_train(const ExperimentConfig& config, const std::string& strategy, bool force,
               bool verbose) {
    config.validate();
    for (const std::uint64_t seed : config.seeds) {
        const std::string cell = cell_dir(config, strategy, seed);
        const std::string stage_text = train_stage_text(config, strategy, seed);
        if (!force && stamp_matches(cell, "train", stage_text) &&
            fs::exists(cell + "/checkpoints/model.ckpt")) {
            continue;
        }
        CellInputs in = load_cell_inputs(config, strategy, seed);

        std::vector<SequenceExample> rec_examples;
        for (const auto& [user, split] : in.interactions.splits) {
            const auto& hist = in.interactions.histories.at(user);
            for (const int target_idx : split.train_targets) {
                const std::vector<std::string> input(hist.begin(), hist.begin() + target_idx);
                rec_examples.push_back(build_rec_example(
                    input, hist[static_cast<std::size_t>(target_idx)], in.spec.fusion, in.map_ptrs,
                    in.vocab, config.max_history_items, user, config.suffix_policy));
            }
        }

        std::vector<SequenceExample> align_examples;
        const bool is_lfpp = in.spec.fusion.kind == FusionKind::kLatePlus;
        if (is_lfpp) {
            const SemanticIdMap& txt_map = in.sidmaps.at(in.spec.fusion.modalities[0]);
            const SemanticIdMap& img_map = in.sidmaps.at(in.spec.fusion.modalities[1]);
            std::set<std::string> items;
            if (config.align_train_items_only) {
                for (const auto& [user, hist] : in.interactions.histories) {
                    const auto& split = in.interactions.splits.at(user);
                    for (int j = 0; j <= (split.train_targets.empty()
                                              ? 0
                                              : split.train_targets.back());
                         ++j) {
                        items.insert(hist[static_cast<std::size_t>(j)]);
                    }
                }
            } else {
                for (const auto& [id, entry] : txt_map.entries) items.insert(id);
            }
            for (const std::string& item : items) {
                auto pair = build_alignment_examples(item, txt_map, img_map, in.vocab);
                align_examples.push_back(std::move(pair[0]));
                align_examples.push_back(std::move(pair[1]));
            }
        }

        ModelConfig mc = config.model;
        mc.vocab_size = in.vocab.size();
        mc.seed = seed;
        std::size_t max_src = 0, max_tgt = 0;
        for (const auto& ex : rec_examples) {
            max_src = std::max(max_src, ex.source.size());
            max_tgt = std::max(max_tgt, ex.target.size());
        }
        for (const auto& ex : align_examples) {
            max_src = std::max(max_src, ex.source.size());
            max_tgt = std::max(max_tgt, ex.target.size());
        }
        if (static_cast<int>(max_src) > mc.max_source_len) {
            throw ConfigError("longest source (" + std::to_string(max_src) +
                              " tokens) exceeds model.max_source_len; raise it or lower "
                              "max_history_items");
        }
        if (static_cast<int>(max_tgt) > mc.max_target_len) {
            throw ConfigError("longest target exceeds model.max_target_len");
        }

        TrainSchedule schedule = config.schedule;
        schedule.seed = seed;
        if (!is_lfpp) schedule.align_steps = 0;

        Seq2SeqModel model(mc);
        const TrainResult result = train(model, align_examples, rec_examples, schedule, verbose);

        fs::create_directories(cell + "/checkpoints");
        save_model(model, cell + "/checkpoints/model.ckpt");
        save_vocab(in.vocab, cell + "/checkpoints/vocab.ckpt");
        in.vocab.save_json(cell + "/checkpoints/vocab.json");
        write_losscurve(result, cell + "/losscurve.csv");
        std::vector<SequenceExample> all_examples = align_examples;
        all_examples.insert(all_examples.end(), rec_examples.begin(), rec_examples.end());
        save_examples(all_examples, cell + "/examples.jsonl");
        write_stamp(cell, "train", stage_text);
    }
}

void cmd_eval(const ExperimentConfig& config, const std::string& strategy, bool force,
              bool unconstrained) {
    config.validate();
    const bool constrained = config.eval.constrained && !unconstrained;
    for (const std::uint64_t seed : config.seeds) {
        const std::string cell = cell_dir(config, strategy, seed);
        const std::string stage_text = eval_stage_text(config, strategy, seed, constrained);
        if (!force && stamp_matches(cell, "eval", stage_text) &&
            fs::exists(cell + "/report.json")) {
            continue;
        }
        require_file(cell + "/checkpoints/model.ckpt", "run the train command first");
        CellInputs in = load_cell_inputs(config, strategy, seed);
        const Seq2SeqModel model = load_model(cell + "/checkpoints/model.ckpt");

        const auto targets =
            item_target_sequences(in.spec.fusion, in.map_ptrs, in.vocab, config.suffix_policy);
        const PrefixTrie trie = build_prefix_trie(targets);
        std::map<std::vector<int>, std::string> sequence_to_item;
        std::size_t max_target_len = 0;
        for (const auto& [item, seq] : targets) {
            sequence_to_item[seq] = item;
            max_target_len = std::max(max_target_len, seq.size());
        }

        std::vector<RankedPrediction> predictions;
        std::vector<SequenceExample> test_examples;
        std::size_t total_hyps = 0, in_catalog_hyps = 0;
        for (const auto& [user, split] : in.interactions.splits) {
            const auto& hist = in.interactions.histories.at(user);
            const std::vector<std::string> input(hist.begin(),
                                                 hist.begin() + split.test_target);
            const SequenceExample ex = build_rec_example(
                input, hist[static_cast<std::size_t>(split.test_target)], in.spec.fusion,
                in.map_ptrs, in.vocab, config.max_history_items, user, config.suffix_policy);
            const auto hyps =
                beam_search(model, ex.source, config.eval.beam_width,
                            constrained ? &trie : nullptr, static_cast<int>(max_target_len) + 1);
            RankedPrediction pred;
            pred.user = user;
            pred.truth = hist[static_cast<std::size_t>(split.test_target)];
            for (const BeamHypothesis& hyp : hyps) {
                ++total_hyps;
                const auto it = sequence_to_item.find(hyp.tokens);
                if (it != sequence_to_item.end()) {
                    ++in_catalog_hyps;
                    pred.candidates.push_back(it->second);
                }
            }
            predictions.push_back(std::move(pred));
            test_examples.push_back(std::move(ex));
        }

        fs::create_directories(cell + "/predictions");
        save_predictions(predictions, cell + "/predictions/predictions.jsonl");

        json report;
        report["strategy"] = strategy;
        report["seed"] = seed;
        report["constrained"] = constrained;
        report["n_users"] = predictions.size();
        report["metrics"] = {{"mrr", mrr(predictions)},
                             {"ndcg@5", ndcg_at_k(predictions, config.eval.k)},
                             {"hits@5", hits_at_k(predictions, config.eval.k)}};
        report["in_catalog_rate"] =
            total_hyps == 0 ? 1.0
                            : static_cast<double>(in_catalog_hyps) / static_cast<double>(total_hyps);
        if (in.spec.fusion.modalities.size() > 1) {
            json partial;
            for (const std::string& mod : in.spec.fusion.modalities) {
                partial[mod] = partial_hits(predictions, in.sidmaps.at(mod), config.eval.k);
            }
            partial["full"] = hits_at_k(predictions, config.eval.k);
            report["partial_hits@5"] = std::move(partial);
        }
        report["position_accuracy"] = position_accuracy(model, test_examples);

        {
            std::ofstream out(cell + "/report.json", std::ios::binary);
            out << report.dump(2) << '\n';
        }
        {
            std::ofstream out(cell + "/report.csv", std::ios::binary);
            out << "strategy,seed,metric,value\n";
            for (const auto& [metric, value] : report.at("metrics").items()) {
                out << strategy << ',' << seed << ',' << metric << ','
                    << format_double(value.get<double>()) << '\n';
            }
        }
        write_stamp(cell, "eval", stage_text);
    }
}

// ---------------------------------------------------------------------------
// Merged report
// ---------------------------------------------------------------------------

namespace {

json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing report '" + path + "'; run the eval command first");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FormatError("malformed report: " + path);
    return j;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

void cmd_report(const ExperimentConfig& config) {
    config.validate();
    const std::vector<std::string> metric_names = {"mrr", "ndcg@5", "hits@5"};

    json merged;
    merged["name"] = config.name;
    json rows = json::array();
    json summary = json::object();
    for (const std::string& strategy : config.strategies) {
        std::map<std::string, std::vector<double>> metric_values;
        for (const std::uint64_t seed : config.seeds) {
            const json cell =
                read_json_file(cell_dir(config, strategy, seed) + "/report.json");
            json row;
            row["strategy"] = strategy;
            row["seed"] = seed;
            row["metrics"] = cell.at("metrics");
            if (cell.contains("partial_hits@5")) row["partial_hits@5"] = cell.at("partial_hits@5");
            row["in_catalog_rate"] = cell.at("in_catalog_rate");
            rows.push_back(std::move(row));
            for (const std::string& m : metric_names) {
                metric_values[m].push_back(cell.at("metrics").at(m).get<double>());
            }
        }
        json stats;
        for (const std::string& m : metric_names) {
            stats[m] = {{"mean", mean_of(metric_values[m])},
                        {"stddev", stddev_of(metric_values[m])}};
        }
        summary[strategy] = std::move(stats);
    }
    merged["rows"] = std::move(rows);
    merged["summary"] = std::move(summary);

    // AMI diagnostics over first-level codes (per modality pair and against
    // ground-truth cluster labels when available).
    auto sidmap_path_for = [&](const std::string& mod,
                               std::uint64_t seed) -> std::string {
        for (const std::string& strategy : config.strategies) {
            const StrategySpec spec = parse_strategy(strategy, config);
            for (const std::string& m : spec.fusion.modalities) {
                if (m == mod) {
                    const std::string p =
                        cell_dir(config, strategy, seed) + "/sidmaps/" + mod + ".jsonl";
                    if (fs::exists(p)) return p;
                }
            }
        }
        return "";
    };

    json ami_diag = json::object();
    {
        std::set<std::string> mods;
        for (const std::string& strategy : config.strategies) {
            for (const std::string& m : parse_strategy(strategy, config).fusion.modalities) {
                mods.insert(m);
            }
        }
        std::vector<std::string> mod_list(mods.begin(), mods.end());
        for (std::size_t i = 0; i < mod_list.size(); ++i) {
            for (std::size_t j = i + 1; j < mod_list.size(); ++j) {
                std::vector<double> values;
                for (const std::uint64_t seed : config.seeds) {
                    const std::string pa = sidmap_path_for(mod_list[i], seed);
                    const std::string pb = sidmap_path_for(mod_list[j], seed);
                    if (pa.empty() || pb.empty()) continue;
                    const SemanticIdMap ma = load_sidmap(pa, mod_list[i]);
                    const SemanticIdMap mb = load_sidmap(pb, mod_list[j]);
                    std::vector<std::string> items;
                    for (const auto& [id, e] : ma.entries) items.push_back(id);
                    values.push_back(
                        ami(first_level_labels(ma, items), first_level_labels(mb, items)));
                }
                if (!values.empty()) {
                    ami_diag[mod_list[i] + "|" + mod_list[j]] = {{"per_seed", values},
                                                                 {"mean", mean_of(values)}};
                }
            }
        }
        // Against ground-truth clusters.
        for (const std::string& mod : mod_list) {
            std::vector<double> values;
            for (const std::uint64_t seed : config.seeds) {
                const std::string pa = sidmap_path_for(mod, seed);
                const std::string labels_path = data_dir_for_seed(config, seed) + "/labels.jsonl";
                if (pa.empty() || !fs::exists(labels_path)) continue;
                const SemanticIdMap ma = load_sidmap(pa, mod);
                const LabelMap labels = load_labels(labels_path);
                const auto it = labels.find(mod);
                if (it == labels.end()) continue;
                std::vector<std::string> items;
                std::vector<int> truth;
                for (const auto& [id, e] : ma.entries) {
                    const auto lit = it->second.find(id);
                    if (lit == it->second.end()) break;
                    items.push_back(id);
                    truth.push_back(lit->second);
                }
                if (items.size() != ma.entries.size()) continue;
                values.push_back(ami(first_level_labels(ma, items), truth));
            }
            if (!values.empty()) {
                ami_diag[mod + "|truth"] = {{"per_seed", values}, {"mean", mean_of(values)}};
            }
        }
    }
    merged["diagnostics"]["ami"] = std::move(ami_diag);

    // Prediction overlap between unimodal baselines and EF.
    {
        json overlap = json::object();
        std::vector<std::string> basis;
        for (const std::string& s :
             {config.synth.text_modality, config.synth.image_modality, std::string("ef")}) {
            if (std::find(config.strategies.begin(), config.strategies.end(), s) !=
                config.strategies.end()) {
                basis.push_back(s);
            }
        }
        for (std::size_t i = 0; i < basis.size(); ++i) {
            for (std::size_t j = i + 1; j < basis.size(); ++j) {
                std::vector<double> hits_mode, top1_mode;
                for (const std::uint64_t seed : config.seeds) {
                    const std::string pa = cell_dir(config, basis[i], seed) +
                                           "/predictions/predictions.jsonl";
                    const std::string pb = cell_dir(config, basis[j], seed) +
                                           "/predictions/predictions.jsonl";
                    if (!fs::exists(pa) || !fs::exists(pb)) continue;
                    const auto preds_a = load_predictions(pa);
                    const auto preds_b = load_predictions(pb);
                    hits_mode.push_back(
                        prediction_overlap(preds_a, preds_b, OverlapMode::kHits, config.eval.k));
                    top1_mode.push_back(
                        prediction_overlap(preds_a, preds_b, OverlapMode::kTop1, config.eval.k));
                }
                if (!hits_mode.empty()) {
                    overlap[basis[i] + "|" + basis[j]] = {
                        {"hits", {{"per_seed", hits_mode}, {"mean", mean_of(hits_mode)}}},
                        {"top1", {{"per_seed", top1_mode}, {"mean", mean_of(top1_mode)}}}};
                }
            }
        }
        merged["diagnostics"]["overlap"] = std::move(overlap);
    }

    const std::string dir = experiment_dir(config);
    fs::create_directories(dir);
    {
        std::ofstream out(dir + "/report.json", std::ios::binary);
        out << merged.dump(2) << '\n';
    }
    {
        std::ofstream out(dir + "/report.csv", std::ios::binary);
        out << "strategy,seed,metric,value\n";
        for (const auto& row : merged.at("rows")) {
            for (const std::string& m : metric_names) {
                out << row.at("strategy").get<std::string>() << ','
                    << row.at("seed").get<std::uint64_t>() << ',' << m << ','
                    << format_double(row.at("metrics").at(m).get<double>()) << '\n';
            }
        }
        for (const std::string& strategy : config.strategies) {
            for (const std::string& m : metric_names) {
                out << strategy << ",mean," << m << ','
                    << format_double(
                           merged.at("summary").at(strategy).at(m).at("mean").get<double>())
                    << '\n';
            }
        }
    }
}

void cmd_ablate(const ExperimentConfig& config, const std::string& axis, bool force,
                bool verbose) {
    config.validate();
    std::vector<int> values;
    if (axis == "id_length") {
        values = {2, 3, 4};
    } else if (axis == "codebook_size") {
        values = {64, 128, 256, 512};
    } else {
        throw ConfigError("unknown ablation axis '" + axis +
                          "' (expected id_length or codebook_size)");
    }

    json table = json::array();
    for (const int v : values) {
        ExperimentConfig sub = config;
        sub.name = config.name + "-ablate-" + axis + "-" + std::to_string(v);
        if (axis == "id_length") {
            sub.quant.levels = v;
            for (auto& [mod, qc] : sub.quant_overrides) qc.levels = v;
        } else {
            sub.quant.codebook_size = v;
            for (auto& [mod, qc] : sub.quant_overrides) qc.codebook_size = v;
        }
        run_pipeline(sub, force, verbose);
        const json merged = read_json_file(experiment_dir(sub) + "/report.json");
        for (const std::string& strategy : sub.strategies) {
            json row;
            row[axis] = v;
            row["strategy"] = strategy;
            for (const auto& [metric, stats] : merged.at("summary").at(strategy).items()) {
                row[metric] = stats.at("mean");
            }
            table.push_back(std::move(row));
        }
    }

    const std::string dir = experiment_dir(config);
    fs::create_directories(dir);
    {
        std::ofstream out(dir + "/ablate_" + axis + ".json", std::ios::binary);
        out << table.dump(2) << '\n';
    }
    {
        std::ofstream out(dir + "/ablate_" + axis + ".csv", std::ios::binary);
        out << axis << ",strategy,mrr,ndcg@5,hits@5\n";
        for (const auto& row : table) {
            out << row.at(axis).get<int>() << ',' << row.at("strategy").get<std::string>() << ','
                << format_double(row.at("mrr").get<double>()) << ','
                << format_double(row.at("ndcg@5").get<double>()) << ','
                << format_double(row.at("hits@5").get<double>()) << '\n';
        }
    }
}

void run_pipeline(const ExperimentConfig& config, bool force, bool verbose) {
    cmd_synth(config, force);
    cmd_quantize(config, force);
    for (const std::string& strategy : config.strategies) {
        cmd_train(config, strategy, force, verbose);
        cmd_eval(config, strategy, force);
    }
    cmd_report(config);
}

std::vector<double> position_accuracy(const Seq2SeqModel& model,
                                      const std::vector<SequenceExample>& examples) {
    std::vector<std::size_t> correct, total;
    for (const SequenceExample& ex : examples) {
        const Seq2SeqModel::Encoded enc = model.encode(ex.source);
        const std::vector<int> argmax = model.teacher_forced_argmax(enc, ex.target);
        if (argmax.size() > total.size()) {
            correct.resize(argmax.size(), 0);
            total.resize(argmax.size(), 0);
        }
        for (std::size_t i = 0; i < argmax.size(); ++i) {
            ++total[i];
            if (argmax[i] == ex.target[i]) ++correct[i];
        }
    }
    std::vector<double> acc(total.size(), 0.0);
    for (std::size_t i = 0; i < total.size(); ++i) {
        acc[i] = total[i] == 0 ? 0.0
                               : static_cast<double>(correct[i]) / static_cast<double>(total[i]);
    }
    return acc;
}

}  // namespace mgrec
