// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "mgrec/formats.hpp"

namespace mgrec {

enum class FusionKind { kEarly, kLate, kLatePlus };

std::string to_string(FusionKind kind);
FusionKind fusion_kind_from_string(const std::string& name);

/// Assembly strategy: which modality streams feed the item's token sequence
/// and how blocks are joined (EF: one fused stream; LF: plain concatenation;
/// LF++: separator tokens between modality blocks).
struct FusionStrategy {
    FusionKind kind = FusionKind::kLate;
    std::vector<std::string> modalities = {"txt", "img"};

    void validate() const;
};

/// Whether an item's modality block always ends with its suffix token, or the
/// suffix is dropped when the item's codeword tuple is unambiguous.
enum class SuffixPolicy { kAlways, kOmitUnambiguous };

struct TokenInfo {
    enum class Kind { kPad, kBos, kEos, kRec, kAlignI2T, kAlignT2I, kSep, kSuffix, kCode };
    Kind kind = Kind::kPad;
    int index = 0;         // separator ordinal (1-based) or suffix value
    std::string modality;  // code tokens only
    int level = 0;         // 1-based, code tokens only
    int code = 0;
};

/// Bijection between (modality, level, code) triples plus special tokens and
/// dense token ids starting at 0.
class TokenVocab {
public:
    struct ModalitySpec {
        std::string modality;
        int levels = 0;
        int codebook_size = 0;
    };

    TokenVocab() = default;
    TokenVocab(std::vector<ModalitySpec> specs, int n_suffixes, int n_separators);

    /// Derives the vocabulary from semantic-ID maps (in modality order):
    /// suffix token count from the largest observed suffix, one separator per
    /// modality transition.
    static TokenVocab build(const std::vector<const SemanticIdMap*>& maps);

    int size() const { return static_cast<int>(infos_.size()); }

    int pad() const { return 0; }
    int bos() const { return 1; }
    int eos() const { return 2; }
    int rec() const { return 3; }
    int align_i2t() const { return 4; }
    int align_t2i() const { return 5; }
    int sep(int ordinal) const;  // ordinal in [1, n_separators]
    int suffix(int value) const;
    int code_token(const std::string& modality, int level, int code) const;  // level 1-based

    const TokenInfo& info(int token) const;
    std::string name(int token) const;

    int n_separators() const { return n_separators_; }
    int n_suffixes() const { return n_suffixes_; }
    const std::vector<ModalitySpec>& specs() const { return specs_; }

    void save_json(const std::string& path) const;
    std::string payload() const;
    static TokenVocab from_payload(const std::string& payload);

private:
    void rebuild();

    std::vector<ModalitySpec> specs_;
    int n_suffixes_ = 1;
    int n_separators_ = 0;
    std::vector<TokenInfo> infos_;
    std::map<std::tuple<std::string, int, int>, int> code_lookup_;
};

void save_vocab(const TokenVocab& vocab, const std::string& path);  // checkpoint kind "vocab"
TokenVocab load_vocab(const std::string& path);

enum class TaskTag { kRec, kAlignI2T, kAlignT2I };

std::string to_string(TaskTag tag);

struct SequenceExample {
    TaskTag task = TaskTag::kRec;
    std::vector<int> source;
    std::vector<int> target;
    std::string user_id;
};

void save_examples(const std::vector<SequenceExample>& examples, const std::string& path);
std::vector<SequenceExample> load_examples(const std::string& path);

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Concatenates per-modality vectors (L2-normalized, then scaled) in table
/// order into a single "fused" table. Item sets must match exactly.
EmbeddingTable fuse_embeddings(const std::vector<const EmbeddingTable*>& tables,
                               const std::map<std::string, double>& scales);

using SidMapsByModality = std::map<std::string, const SemanticIdMap*>;

/// The item's token block for one modality: level code tokens, then the
/// suffix token (per policy).
std::vector<int> modality_block(const std::string& item, const SemanticIdMap& map,
                                const TokenVocab& vocab,
                                SuffixPolicy policy = SuffixPolicy::kAlways);

std::vector<int> item_tokens(const std::string& item, const FusionStrategy& strategy,
                             const SidMapsByModality& maps, const TokenVocab& vocab,
                             SuffixPolicy policy = SuffixPolicy::kAlways);

SequenceExample build_rec_example(const std::vector<std::string>& history,
                                  const std::string& target_item, const FusionStrategy& strategy,
                                  const SidMapsByModality& maps, const TokenVocab& vocab,
                                  int max_history_items, const std::string& user_id,
                                  SuffixPolicy policy = SuffixPolicy::kAlways);

/// Image-to-text and text-to-image alignment pairs built from the item's own
/// semantic IDs alone. The pairs relate pure code tuples; the collision
/// suffix is disambiguation bookkeeping and stays out of them.
std::array<SequenceExample, 2> build_alignment_examples(const std::string& item,
                                                        const SemanticIdMap& txt_map,
                                                        const SemanticIdMap& img_map,
                                                        const TokenVocab& vocab);

/// item -> full target sequence (item tokens + EOS) for every catalog item.
std::map<std::string, std::vector<int>> item_target_sequences(
    const FusionStrategy& strategy, const SidMapsByModality& maps, const TokenVocab& vocab,
    SuffixPolicy policy = SuffixPolicy::kAlways);

}  // namespace mgrec
