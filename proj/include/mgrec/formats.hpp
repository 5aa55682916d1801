// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mgrec/types.hpp"

namespace mgrec {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Per-modality embedding vectors, keyed by item id. Vectors are stored in
/// float; numeric kernels promote to double where it matters.
struct EmbeddingTable {
    std::string modality;
    int dim = 0;
    std::map<std::string, VectorF> rows;

    std::size_t size() const { return rows.size(); }

    /// Item ids in ascending order (the canonical item ordering).
    std::vector<std::string> item_ids() const;

    /// Rows stacked into an n x dim double matrix, items in ascending id order.
    Matrix to_matrix() const;
};

/// Leave-last-out designation for one user, as indices into the history.
struct UserSplit {
    std::vector<int> train_targets;
    int val_target = -1;
    int test_target = -1;
};

struct InteractionDataset {
    std::map<std::string, std::vector<std::string>> histories;
    std::map<std::string, std::vector<double>> timestamps;
    std::map<std::string, UserSplit> splits;
    bool splits_populated = false;

    std::size_t n_users() const { return histories.size(); }
    std::size_t n_events() const;
};

/// One item's semantic ID: codeword tuple plus collision suffix.
struct SidEntry {
    std::vector<int> codes;
    int suffix = 0;

    bool operator==(const SidEntry& o) const { return codes == o.codes && suffix == o.suffix; }
};

struct SemanticIdMap {
    std::string modality;
    int levels = 0;
    int codebook_size = 0;
    std::map<std::string, SidEntry> entries;

    /// True when more than one item shares this codeword tuple.
    bool has_collision(const std::vector<int>& codes) const;

    /// Recomputes the tuple multiplicity index; call after editing entries.
    void rebuild_collision_index();

    /// (codes, suffix) pairs are unique across items; throws on violation.
    void check_invariants() const;

private:
    std::map<std::vector<int>, int> tuple_counts_;
};

// ---------------------------------------------------------------------------
// Line-delimited JSON files
// ---------------------------------------------------------------------------

/// Reads `embeddings.jsonl` records {"item_id","modality","vector"}. When
/// `modality` is empty the file must be single-modality; otherwise only the
/// matching records are loaded. Errors carry the offending line number.
EmbeddingTable load_embeddings(const std::string& path, const std::string& modality = "");

void save_embeddings(const std::vector<const EmbeddingTable*>& tables, const std::string& path);
inline void save_embeddings(const EmbeddingTable& table, const std::string& path) {
    save_embeddings({&table}, path);
}

/// Flat binary embedding table (magic "MGRE"), little-endian throughout.
void save_embeddings_binary(const EmbeddingTable& table, const std::string& path);
EmbeddingTable load_embeddings_binary(const std::string& path, const std::string& modality);

/// Reads `interactions.jsonl` records {"user_id","item_id","ts"}, sorts each
/// user's events by timestamp (ties keep file order) and filters users with
/// fewer than `min_interactions` events. With `filter_items` set, items with
/// fewer than `min_interactions` occurrences are removed as well and the two
/// filters are iterated to a fixed point.
InteractionDataset load_interactions(const std::string& path, int min_interactions = 5,
                                     bool filter_items = true);

void save_interactions(const InteractionDataset& data, const std::string& path);

/// Populates leave-last-out splits: last item is the test target, second to
/// last the validation target, targets 2..n-2 (1-based) are training targets.
/// Every history must have length >= 3.
InteractionDataset split_leave_last_out(InteractionDataset data);

SemanticIdMap load_sidmap(const std::string& path, const std::string& modality = "",
                          int codebook_size = 0);
void save_sidmap(const SemanticIdMap& map, const std::string& path);

/// Ground-truth cluster labels, modality -> item -> cluster.
using LabelMap = std::map<std::string, std::map<std::string, int>>;
LabelMap load_labels(const std::string& path);
void save_labels(const LabelMap& labels, const std::string& path);

/// Throws unless every item in every history is present in all given tables.
void validate_items_covered(const InteractionDataset& data,
                            const std::vector<const EmbeddingTable*>& tables);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace io {

std::uint32_t crc32(const void* data, std::size_t len);

/// Append-only little-endian byte buffer for checkpoint payloads.
class Writer {
public:
    void put_u32(std::uint32_t v);
    void put_u64(std::uint64_t v);
    void put_i32(std::int32_t v);
    void put_f64(double v);
    void put_string(const std::string& s);
    void put_matrix(const Matrix& m);
    void put_vector(const Vector& v);
    void put_matrixf(const MatrixF& m);

    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

/// Cursor over a checkpoint payload; throws CorruptFileError on overrun.
class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::uint32_t get_u32();
    std::uint64_t get_u64();
    std::int32_t get_i32();
    double get_f64();
    std::string get_string();
    Matrix get_matrix();
    Vector get_vector();
    MatrixF get_matrixf();
    VectorF get_f32_block(std::size_t n);

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    const void* take(std::size_t n);
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

/// Writes a checkpoint file: magic, format version, kind tag, payload and a
/// payload checksum. Loading verifies all four and fails loudly.
void save_checkpoint(const std::string& path, const std::string& kind, const std::string& payload);
std::string load_checkpoint(const std::string& path, const std::string& expected_kind);

}  // namespace io

}  // namespace mgrec
