// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include "mgrec/sid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace mgrec {

using nlohmann::json;

std::string to_string(FusionKind kind) {
    switch (kind) {
        case FusionKind::kEarly: return "ef";
        case FusionKind::kLate: return "lf";
        case FusionKind::kLatePlus: return "lfpp";
    }
    return "lf";
}

FusionKind fusion_kind_from_string(const std::string& name) {
    if (name == "ef") return FusionKind::kEarly;
    if (name == "lf") return FusionKind::kLate;
    if (name == "lfpp") return FusionKind::kLatePlus;
    throw ConfigError("unknown fusion kind '" + name + "'");
}

void FusionStrategy::validate() const {
    if (modalities.empty()) throw ConfigError("fusion strategy needs at least one modality");
    if (kind == FusionKind::kEarly && modalities.size() != 1) {
        throw ConfigError("early fusion uses exactly one (fused) modality stream");
    }
    if (kind == FusionKind::kLatePlus && modalities.size() < 2) {
        throw ConfigError("lf++ needs at least two modalities");
    }
}

std::string to_string(TaskTag tag) {
    switch (tag) {
        case TaskTag::kRec: return "rec";
        case TaskTag::kAlignI2T: return "align-i2t";
        case TaskTag::kAlignT2I: return "align-t2i";
    }
    return "rec";
}

namespace {

TaskTag task_from_string(const std::string& s) {
    if (s == "rec") return TaskTag::kRec;
    if (s == "align-i2t") return TaskTag::kAlignI2T;
    if (s == "align-t2i") return TaskTag::kAlignT2I;
    throw FormatError("unknown task tag '" + s + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// TokenVocab
// ---------------------------------------------------------------------------

TokenVocab::TokenVocab(std::vector<ModalitySpec> specs, int n_suffixes, int n_separators)
    : specs_(std::move(specs)), n_suffixes_(n_suffixes), n_separators_(n_separators) {
    if (n_suffixes_ < 1) throw ConfigError("vocab needs at least one suffix token");
    if (n_separators_ < 0) throw ConfigError("negative separator count");
    rebuild();
}

TokenVocab TokenVocab::build(const std::vector<const SemanticIdMap*>& maps) {
    std::vector<ModalitySpec> specs;
    int max_suffix = 0;
    for (const SemanticIdMap* map : maps) {
        if (map->codebook_size <= 0) {
            throw ConfigError("sidmap '" + map->modality + "' has no codebook size set");
        }
        specs.push_back({map->modality, map->levels, map->codebook_size});
        for (const auto& [id, entry] : map->entries) max_suffix = std::max(max_suffix, entry.suffix);
    }
    return TokenVocab(std::move(specs), max_suffix + 1,
                      std::max(0, static_cast<int>(maps.size()) - 1));
}

void TokenVocab::rebuild() {
    infos_.clear();
    code_lookup_.clear();
    auto push = [this](TokenInfo info) { infos_.push_back(std::move(info)); };
    push({TokenInfo::Kind::kPad, 0, "", 0, 0});
    push({TokenInfo::Kind::kBos, 0, "", 0, 0});
    push({TokenInfo::Kind::kEos, 0, "", 0, 0});
    push({TokenInfo::Kind::kRec, 0, "", 0, 0});
    push({TokenInfo::Kind::kAlignI2T, 0, "", 0, 0});
    push({TokenInfo::Kind::kAlignT2I, 0, "", 0, 0});
    for (int s = 1; s <= n_separators_; ++s) push({TokenInfo::Kind::kSep, s, "", 0, 0});
    for (int s = 0; s < n_suffixes_; ++s) push({TokenInfo::Kind::kSuffix, s, "", 0, 0});
    for (const ModalitySpec& spec : specs_) {
        for (int level = 1; level <= spec.levels; ++level) {
            for (int code = 0; code < spec.codebook_size; ++code) {
                code_lookup_[{spec.modality, level, code}] = static_cast<int>(infos_.size());
                push({TokenInfo::Kind::kCode, 0, spec.modality, level, code});
            }
        }
    }
}

int TokenVocab::sep(int ordinal) const {
    if (ordinal < 1 || ordinal > n_separators_) {
        throw Error("separator ordinal " + std::to_string(ordinal) + " out of range");
    }
    return 6 + (ordinal - 1);
}

int TokenVocab::suffix(int value) const {
    if (value < 0 || value >= n_suffixes_) {
        throw Error("suffix " + std::to_string(value) + " outside vocabulary (have " +
                    std::to_string(n_suffixes_) + ")");
    }
    return 6 + n_separators_ + value;
}

int TokenVocab::code_token(const std::string& modality, int level, int code) const {
    const auto it = code_lookup_.find({modality, level, code});
    if (it == code_lookup_.end()) {
        throw Error("unknown code token <" + modality + "-" + std::to_string(level) + "-" +
                    std::to_string(code) + ">");
    }
    return it->second;
}

const TokenInfo& TokenVocab::info(int token) const {
    if (token < 0 || token >= size()) {
        throw Error("token id " + std::to_string(token) + " out of range");
    }
    return infos_[static_cast<std::size_t>(token)];
}

std::string TokenVocab::name(int token) const {
    const TokenInfo& t = info(token);
    switch (t.kind) {
        case TokenInfo::Kind::kPad: return "<pad>";
        case TokenInfo::Kind::kBos: return "<bos>";
        case TokenInfo::Kind::kEos: return "<eos>";
        case TokenInfo::Kind::kRec: return "<rec>";
        case TokenInfo::Kind::kAlignI2T: return "<align-i2t>";
        case TokenInfo::Kind::kAlignT2I: return "<align-t2i>";
        case TokenInfo::Kind::kSep: return "<sep-" + std::to_string(t.index) + ">";
        case TokenInfo::Kind::kSuffix: return "<suf-" + std::to_string(t.index) + ">";
        case TokenInfo::Kind::kCode:
            return "<" + t.modality + "-" + std::to_string(t.level) + "-" + std::to_string(t.code) +
                   ">";
    }
    return "<?>";
}

void TokenVocab::save_json(const std::string& path) const {
    json j;
    j["n_separators"] = n_separators_;
    j["n_suffixes"] = n_suffixes_;
    json mods = json::array();
    for (const ModalitySpec& spec : specs_) {
        mods.push_back({{"modality", spec.modality},
                        {"levels", spec.levels},
                        {"codebook_size", spec.codebook_size}});
    }
    j["modalities"] = std::move(mods);
    json tokens;
    for (int t = 0; t < size(); ++t) tokens[name(t)] = t;
    j["tokens"] = std::move(tokens);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write vocab file: " + path);
    out << j.dump(2) << '\n';
}

std::string TokenVocab::payload() const {
    io::Writer w;
    w.put_i32(n_suffixes_);
    w.put_i32(n_separators_);
    w.put_u32(static_cast<std::uint32_t>(specs_.size()));
    for (const ModalitySpec& spec : specs_) {
        w.put_string(spec.modality);
        w.put_i32(spec.levels);
        w.put_i32(spec.codebook_size);
    }
    return w.bytes();
}

TokenVocab TokenVocab::from_payload(const std::string& payload) {
    io::Reader r(payload);
    const int n_suffixes = r.get_i32();
    const int n_separators = r.get_i32();
    const std::uint32_t n_specs = r.get_u32();
    std::vector<ModalitySpec> specs;
    for (std::uint32_t i = 0; i < n_specs; ++i) {
        ModalitySpec spec;
        spec.modality = r.get_string();
        spec.levels = r.get_i32();
        spec.codebook_size = r.get_i32();
        specs.push_back(std::move(spec));
    }
    return TokenVocab(std::move(specs), n_suffixes, n_separators);
}

void save_vocab(const TokenVocab& vocab, const std::string& path) {
    io::save_checkpoint(path, "vocab", vocab.payload());
}

TokenVocab load_vocab(const std::string& path) {
    return TokenVocab::from_payload(io::load_checkpoint(path, "vocab"));
}

// ---------------------------------------------------------------------------
// Examples file
// ---------------------------------------------------------------------------

void save_examples(const std::vector<SequenceExample>& examples, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write examples file: " + path);
    for (const SequenceExample& ex : examples) {
        json rec;
        rec["task"] = to_string(ex.task);
        rec["source"] = ex.source;
        rec["target"] = ex.target;
        rec["user_id"] = ex.user_id;
        out << rec.dump() << '\n';
    }
}

std::vector<SequenceExample> load_examples(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open examples file: " + path);
    std::vector<SequenceExample> examples;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": malformed record");
        }
        SequenceExample ex;
        ex.task = task_from_string(rec.at("task").get<std::string>());
        ex.source = rec.at("source").get<std::vector<int>>();
        ex.target = rec.at("target").get<std::vector<int>>();
        ex.user_id = rec.value("user_id", "");
        examples.push_back(std::move(ex));
    }
    return examples;
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

EmbeddingTable fuse_embeddings(const std::vector<const EmbeddingTable*>& tables,
                               const std::map<std::string, double>& scales) {
    if (tables.empty()) throw Error("fuse_embeddings: no tables");
    const auto& first = *tables.front();
    int fused_dim = 0;
    for (const EmbeddingTable* t : tables) {
        if (t->rows.size() != first.rows.size()) {
            throw Error("fuse_embeddings: item sets differ between '" + first.modality +
                        "' and '" + t->modality + "'");
        }
        fused_dim += t->dim;
    }

    EmbeddingTable fused;
    fused.modality = "fused";
    fused.dim = fused_dim;
    for (const auto& [id, v0] : first.rows) {
        VectorF out(fused_dim);
        int offset = 0;
        for (const EmbeddingTable* t : tables) {
            const auto it = t->rows.find(id);
            if (it == t->rows.end()) {
                throw Error("fuse_embeddings: item '" + id + "' missing from '" + t->modality +
                            "'");
            }
            VectorF v = it->second;
            const float norm = v.norm();
            if (norm > 0.0f) v /= norm;
            const double scale = scales.count(t->modality) ? scales.at(t->modality) : 1.0;
            out.segment(offset, t->dim) = v * static_cast<float>(scale);
            offset += t->dim;
        }
        fused.rows.emplace(id, std::move(out));
    }
    return fused;
}

std::vector<int> modality_block(const std::string& item, const SemanticIdMap& map,
                                const TokenVocab& vocab, SuffixPolicy policy) {
    const auto it = map.entries.find(item);
    if (it == map.entries.end()) {
        throw Error("item '" + item + "' has no semantic id in modality '" + map.modality + "'");
    }
    const SidEntry& entry = it->second;
    std::vector<int> tokens;
    tokens.reserve(entry.codes.size() + 1);
    for (std::size_t level = 0; level < entry.codes.size(); ++level) {
        tokens.push_back(
            vocab.code_token(map.modality, static_cast<int>(level) + 1, entry.codes[level]));
    }
    const bool omit = policy == SuffixPolicy::kOmitUnambiguous && entry.suffix == 0 &&
                      !map.has_collision(entry.codes);
    if (!omit) tokens.push_back(vocab.suffix(entry.suffix));
    return tokens;
}

std::vector<int> item_tokens(const std::string& item, const FusionStrategy& strategy,
                             const SidMapsByModality& maps, const TokenVocab& vocab,
                             SuffixPolicy policy) {
    strategy.validate();
    std::vector<int> tokens;
    int block_index = 0;
    for (const std::string& modality : strategy.modalities) {
        const auto it = maps.find(modality);
        if (it == maps.end()) {
            throw Error("no semantic-id map for modality '" + modality + "'");
        }
        if (strategy.kind == FusionKind::kLatePlus && block_index > 0) {
            tokens.push_back(vocab.sep(block_index));
        }
        const std::vector<int> block = modality_block(item, *it->second, vocab, policy);
        tokens.insert(tokens.end(), block.begin(), block.end());
        ++block_index;
    }
    return tokens;
}

SequenceExample build_rec_example(const std::vector<std::string>& history,
                                  const std::string& target_item, const FusionStrategy& strategy,
                                  const SidMapsByModality& maps, const TokenVocab& vocab,
                                  int max_history_items, const std::string& user_id,
                                  SuffixPolicy policy) {
    if (history.empty()) throw Error("build_rec_example: empty history");
    SequenceExample ex;
    ex.task = TaskTag::kRec;
    ex.user_id = user_id;
    ex.source.push_back(vocab.rec());
    const std::size_t keep = std::min<std::size_t>(history.size(),
                                                   static_cast<std::size_t>(max_history_items));
    for (std::size_t i = history.size() - keep; i < history.size(); ++i) {
        const std::vector<int> tokens = item_tokens(history[i], strategy, maps, vocab, policy);
        ex.source.insert(ex.source.end(), tokens.begin(), tokens.end());
    }
    ex.source.push_back(vocab.eos());
    ex.target = item_tokens(target_item, strategy, maps, vocab, policy);
    ex.target.push_back(vocab.eos());
    return ex;
}

namespace {

/// Code tokens only: alignment pairs relate the semantic IDs themselves, so
/// the collision suffix (disambiguation bookkeeping) stays out of them.
std::vector<int> codes_block(const std::string& item, const SemanticIdMap& map,
                             const TokenVocab& vocab) {
    const auto it = map.entries.find(item);
    if (it == map.entries.end()) {
        throw Error("item '" + item + "' has no semantic id in modality '" + map.modality + "'");
    }
    std::vector<int> tokens;
    tokens.reserve(it->second.codes.size());
    for (std::size_t level = 0; level < it->second.codes.size(); ++level) {
        tokens.push_back(vocab.code_token(map.modality, static_cast<int>(level) + 1,
                                          it->second.codes[level]));
    }
    return tokens;
}

}  // namespace

std::array<SequenceExample, 2> build_alignment_examples(const std::string& item,
                                                        const SemanticIdMap& txt_map,
                                                        const SemanticIdMap& img_map,
                                                        const TokenVocab& vocab) {
    const std::vector<int> txt = codes_block(item, txt_map, vocab);
    const std::vector<int> img = codes_block(item, img_map, vocab);

    SequenceExample i2t;
    i2t.task = TaskTag::kAlignI2T;
    i2t.source.push_back(vocab.align_i2t());
    i2t.source.insert(i2t.source.end(), img.begin(), img.end());
    i2t.source.push_back(vocab.eos());
    i2t.target = txt;
    i2t.target.push_back(vocab.eos());

    SequenceExample t2i;
    t2i.task = TaskTag::kAlignT2I;
    t2i.source.push_back(vocab.align_t2i());
    t2i.source.insert(t2i.source.end(), txt.begin(), txt.end());
    t2i.source.push_back(vocab.eos());
    t2i.target = img;
    t2i.target.push_back(vocab.eos());

    return {std::move(i2t), std::move(t2i)};
}

std::map<std::string, std::vector<int>> item_target_sequences(const FusionStrategy& strategy,
                                                              const SidMapsByModality& maps,
                                                              const TokenVocab& vocab,
                                                              SuffixPolicy policy) {
    strategy.validate();
    const auto first = maps.find(strategy.modalities.front());
    if (first == maps.end()) {
        throw Error("no semantic-id map for modality '" + strategy.modalities.front() + "'");
    }
    std::map<std::string, std::vector<int>> out;
    for (const auto& [id, entry] : first->second->entries) {
        std::vector<int> tokens = item_tokens(id, strategy, maps, vocab, policy);
        tokens.push_back(vocab.eos());
        out.emplace(id, std::move(tokens));
    }
    return out;
}

}  // namespace mgrec
