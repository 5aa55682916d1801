// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include "mgrec/formats.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mgrec {

using nlohmann::json;

namespace {

void ensure_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    return in;
}

std::ofstream open_output(const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open file for writing: " + path);
    return out;
}

json parse_line(const std::string& path, std::size_t lineno, const std::string& line) {
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object()) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": malformed record");
    }
    return rec;
}

std::string require_string(const json& rec, const char* key, const std::string& path,
                           std::size_t lineno) {
    if (!rec.contains(key) || !rec.at(key).is_string()) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": missing string field '" +
                          key + "'");
    }
    return rec.at(key).get<std::string>();
}

/// Calls fn(lineno, record) for every non-empty line.
template <typename Fn>
void for_each_record(const std::string& path, Fn&& fn) {
    std::ifstream in = open_input(path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        fn(lineno, parse_line(path, lineno, line));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// EmbeddingTable
// ---------------------------------------------------------------------------

std::vector<std::string> EmbeddingTable::item_ids() const {
    std::vector<std::string> ids;
    ids.reserve(rows.size());
    for (const auto& [id, vec] : rows) ids.push_back(id);
    return ids;
}

Matrix EmbeddingTable::to_matrix() const {
    Matrix m(static_cast<Eigen::Index>(rows.size()), dim);
    Eigen::Index r = 0;
    for (const auto& [id, vec] : rows) m.row(r++) = vec.cast<double>().transpose();
    return m;
}

EmbeddingTable load_embeddings(const std::string& path, const std::string& modality) {
    EmbeddingTable table;
    for_each_record(path, [&](std::size_t lineno, const json& rec) {
        const std::string mod = require_string(rec, "modality", path, lineno);
        if (!modality.empty() && mod != modality) return;
        if (table.modality.empty()) {
            table.modality = mod;
        } else if (table.modality != mod) {
            throw FormatError(path + ":" + std::to_string(lineno) +
                              ": mixed modalities ('" + table.modality + "' vs '" + mod +
                              "'); pass an explicit modality to select one");
        }
        const std::string id = require_string(rec, "item_id", path, lineno);
        if (!rec.contains("vector") || !rec.at("vector").is_array()) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": missing 'vector' array");
        }
        const auto& arr = rec.at("vector");
        VectorF v(static_cast<Eigen::Index>(arr.size()));
        for (std::size_t i = 0; i < arr.size(); ++i) {
            if (!arr[i].is_number()) {
                throw FormatError(path + ":" + std::to_string(lineno) +
                                  ": non-numeric vector entry");
            }
            const double x = arr[i].get<double>();
            if (!std::isfinite(x)) {
                throw FormatError(path + ":" + std::to_string(lineno) +
                                  ": non-finite vector entry");
            }
            v[static_cast<Eigen::Index>(i)] = static_cast<float>(x);
        }
        if (table.dim == 0) {
            table.dim = static_cast<int>(v.size());
        } else if (table.dim != static_cast<int>(v.size())) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": dimension mismatch (got " +
                              std::to_string(v.size()) + ", expected " +
                              std::to_string(table.dim) + ")");
        }
        if (!table.rows.emplace(id, std::move(v)).second) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": duplicate item id '" + id +
                              "'");
        }
    });
    if (table.rows.empty()) throw FormatError(path + ": no embeddings loaded");
    return table;
}

void save_embeddings(const std::vector<const EmbeddingTable*>& tables, const std::string& path) {
    std::ofstream out = open_output(path);
    for (const EmbeddingTable* table : tables) {
        for (const auto& [id, vec] : table->rows) {
            json rec;
            rec["item_id"] = id;
            rec["modality"] = table->modality;
            json arr = json::array();
            for (Eigen::Index i = 0; i < vec.size(); ++i) {
                if (!std::isfinite(vec[i])) {
                    throw FormatError("refusing to write non-finite embedding for item '" + id +
                                      "'");
                }
                arr.push_back(vec[i]);
            }
            rec["vector"] = std::move(arr);
            out << rec.dump() << '\n';
        }
    }
}

namespace {
constexpr char kEmbeddingMagic[4] = {'M', 'G', 'R', 'E'};
constexpr std::uint32_t kEmbeddingBinaryVersion = 1;
}  // namespace

void save_embeddings_binary(const EmbeddingTable& table, const std::string& path) {
    io::Writer w;
    w.put_u32(kEmbeddingBinaryVersion);
    w.put_u32(static_cast<std::uint32_t>(table.rows.size()));
    w.put_u32(static_cast<std::uint32_t>(table.dim));
    std::string body;
    for (const auto& [id, vec] : table.rows) {
        io::Writer entry;
        entry.put_string(id);
        body += entry.bytes();
        body.append(reinterpret_cast<const char*>(vec.data()), sizeof(float) * vec.size());
    }
    std::ofstream out = open_output(path);
    out.write(kEmbeddingMagic, 4);
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
}

EmbeddingTable load_embeddings_binary(const std::string& path, const std::string& modality) {
    std::ifstream in = open_input(path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kEmbeddingMagic, 4) != 0) {
        throw CorruptFileError(path + ": bad magic");
    }
    try {
        io::Reader r(bytes);
        r.get_u32();  // magic, verified above
        const std::uint32_t version = r.get_u32();
        if (version != kEmbeddingBinaryVersion) {
            throw VersionMismatchError(path + ": embedding format version " +
                                       std::to_string(version));
        }
        const std::uint32_t n_items = r.get_u32();
        const std::uint32_t dim = r.get_u32();
        EmbeddingTable table;
        table.modality = modality;
        table.dim = static_cast<int>(dim);
        for (std::uint32_t i = 0; i < n_items; ++i) {
            const std::string id = r.get_string();
            VectorF v = r.get_f32_block(dim);
            if (!table.rows.emplace(id, std::move(v)).second) {
                throw FormatError(path + ": duplicate item id '" + id + "'");
            }
        }
        return table;
    } catch (const CorruptFileError&) {
        throw CorruptFileError(path + ": truncated embedding file");
    }
}

// ---------------------------------------------------------------------------
// Interactions
// ---------------------------------------------------------------------------

std::size_t InteractionDataset::n_events() const {
    std::size_t n = 0;
    for (const auto& [user, hist] : histories) n += hist.size();
    return n;
}

InteractionDataset load_interactions(const std::string& path, int min_interactions,
                                     bool filter_items) {
    struct Event {
        double ts;
        std::string item;
        std::size_t order;
    };
    std::map<std::string, std::vector<Event>> raw;
    std::size_t order = 0;
    for_each_record(path, [&](std::size_t lineno, const json& rec) {
        const std::string user = require_string(rec, "user_id", path, lineno);
        const std::string item = require_string(rec, "item_id", path, lineno);
        if (!rec.contains("ts") || !rec.at("ts").is_number()) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": missing numeric 'ts'");
        }
        raw[user].push_back({rec.at("ts").get<double>(), item, order++});
    });

    for (auto& [user, events] : raw) {
        std::stable_sort(events.begin(), events.end(),
                         [](const Event& a, const Event& b) { return a.ts < b.ts; });
    }

    // Iterated deletion: drop short users, then under-represented items, until
    // nothing changes. The maximal surviving subset is order-independent.
    const std::size_t min_n = static_cast<std::size_t>(std::max(min_interactions, 0));
    bool changed = true;
    while (changed) {
        changed = false;
        for (auto it = raw.begin(); it != raw.end();) {
            if (it->second.size() < min_n) {
                it = raw.erase(it);
                changed = true;
            } else {
                ++it;
            }
        }
        if (!filter_items) break;
        std::map<std::string, std::size_t> item_counts;
        for (const auto& [user, events] : raw) {
            for (const Event& e : events) ++item_counts[e.item];
        }
        for (auto& [user, events] : raw) {
            const std::size_t before = events.size();
            std::erase_if(events, [&](const Event& e) { return item_counts[e.item] < min_n; });
            if (events.size() != before) changed = true;
        }
    }

    if (raw.empty()) throw FormatError(path + ": empty dataset after filtering");

    InteractionDataset data;
    for (auto& [user, events] : raw) {
        auto& hist = data.histories[user];
        auto& ts = data.timestamps[user];
        hist.reserve(events.size());
        ts.reserve(events.size());
        for (const Event& e : events) {
            hist.push_back(e.item);
            ts.push_back(e.ts);
        }
    }
    return data;
}

void save_interactions(const InteractionDataset& data, const std::string& path) {
    std::ofstream out = open_output(path);
    for (const auto& [user, hist] : data.histories) {
        const auto ts_it = data.timestamps.find(user);
        for (std::size_t i = 0; i < hist.size(); ++i) {
            json rec;
            rec["user_id"] = user;
            rec["item_id"] = hist[i];
            rec["ts"] = (ts_it != data.timestamps.end() && i < ts_it->second.size())
                            ? ts_it->second[i]
                            : static_cast<double>(i);
            out << rec.dump() << '\n';
        }
    }
}

InteractionDataset split_leave_last_out(InteractionDataset data) {
    data.splits.clear();
    for (const auto& [user, hist] : data.histories) {
        const int n = static_cast<int>(hist.size());
        if (n < 3) {
            throw FormatError("history for user '" + user + "' has length " + std::to_string(n) +
                              " (< 3), cannot split");
        }
        UserSplit split;
        split.test_target = n - 1;
        split.val_target = n - 2;
        for (int j = 1; j <= n - 3; ++j) split.train_targets.push_back(j);
        data.splits[user] = std::move(split);
    }
    data.splits_populated = true;
    return data;
}

void validate_items_covered(const InteractionDataset& data,
                            const std::vector<const EmbeddingTable*>& tables) {
    for (const auto& [user, hist] : data.histories) {
        for (const std::string& item : hist) {
            for (const EmbeddingTable* table : tables) {
                if (!table->rows.count(item)) {
                    throw FormatError("item '" + item + "' (user '" + user +
                                      "') missing from embedding table '" + table->modality + "'");
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Semantic ID maps
// ---------------------------------------------------------------------------

bool SemanticIdMap::has_collision(const std::vector<int>& codes) const {
    const auto it = tuple_counts_.find(codes);
    return it != tuple_counts_.end() && it->second > 1;
}

void SemanticIdMap::rebuild_collision_index() {
    tuple_counts_.clear();
    for (const auto& [id, entry] : entries) ++tuple_counts_[entry.codes];
}

void SemanticIdMap::check_invariants() const {
    std::map<std::pair<std::vector<int>, int>, std::string> seen;
    for (const auto& [id, entry] : entries) {
        if (levels > 0 && static_cast<int>(entry.codes.size()) != levels) {
            throw FormatError("sidmap '" + modality + "': item '" + id + "' has " +
                              std::to_string(entry.codes.size()) + " codes, expected " +
                              std::to_string(levels));
        }
        for (int c : entry.codes) {
            if (c < 0 || (codebook_size > 0 && c >= codebook_size)) {
                throw FormatError("sidmap '" + modality + "': item '" + id +
                                  "' has out-of-range code " + std::to_string(c));
            }
        }
        if (entry.suffix < 0) {
            throw FormatError("sidmap '" + modality + "': item '" + id + "' has negative suffix");
        }
        auto [it, inserted] = seen.emplace(std::make_pair(entry.codes, entry.suffix), id);
        if (!inserted) {
            throw FormatError("sidmap '" + modality + "': items '" + it->second + "' and '" + id +
                              "' share (codes, suffix)");
        }
    }
}

SemanticIdMap load_sidmap(const std::string& path, const std::string& modality,
                          int codebook_size) {
    SemanticIdMap map;
    map.codebook_size = codebook_size;
    for_each_record(path, [&](std::size_t lineno, const json& rec) {
        const std::string mod = require_string(rec, "modality", path, lineno);
        if (!modality.empty() && mod != modality) return;
        if (map.modality.empty()) {
            map.modality = mod;
        } else if (map.modality != mod) {
            throw FormatError(path + ":" + std::to_string(lineno) +
                              ": mixed modalities; pass an explicit modality to select one");
        }
        const std::string id = require_string(rec, "item_id", path, lineno);
        if (!rec.contains("codes") || !rec.at("codes").is_array() || !rec.contains("suffix")) {
            throw FormatError(path + ":" + std::to_string(lineno) +
                              ": record needs 'codes' array and 'suffix'");
        }
        SidEntry entry;
        for (const auto& c : rec.at("codes")) {
            if (!c.is_number_integer()) {
                throw FormatError(path + ":" + std::to_string(lineno) + ": non-integer code");
            }
            entry.codes.push_back(c.get<int>());
        }
        entry.suffix = rec.at("suffix").get<int>();
        if (map.levels == 0) {
            map.levels = static_cast<int>(entry.codes.size());
        }
        if (!map.entries.emplace(id, std::move(entry)).second) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": duplicate item id '" + id +
                              "'");
        }
    });
    if (map.entries.empty()) throw FormatError(path + ": no semantic ids loaded");
    map.rebuild_collision_index();
    map.check_invariants();
    return map;
}

void save_sidmap(const SemanticIdMap& map, const std::string& path) {
    std::ofstream out = open_output(path);
    for (const auto& [id, entry] : map.entries) {
        json rec;
        rec["item_id"] = id;
        rec["modality"] = map.modality;
        rec["codes"] = entry.codes;
        rec["suffix"] = entry.suffix;
        out << rec.dump() << '\n';
    }
}

LabelMap load_labels(const std::string& path) {
    LabelMap labels;
    for_each_record(path, [&](std::size_t lineno, const json& rec) {
        const std::string mod = require_string(rec, "modality", path, lineno);
        const std::string id = require_string(rec, "item_id", path, lineno);
        if (!rec.contains("cluster") || !rec.at("cluster").is_number_integer()) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": missing integer 'cluster'");
        }
        labels[mod][id] = rec.at("cluster").get<int>();
    });
    return labels;
}

void save_labels(const LabelMap& labels, const std::string& path) {
    std::ofstream out = open_output(path);
    for (const auto& [mod, items] : labels) {
        for (const auto& [id, cluster] : items) {
            json rec;
            rec["item_id"] = id;
            rec["modality"] = mod;
            rec["cluster"] = cluster;
            out << rec.dump() << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace io {

namespace {

struct Crc32Table {
    std::uint32_t t[256];
    Crc32Table() {
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
    }
};

}  // namespace

std::uint32_t crc32(const void* data, std::size_t len) {
    static const Crc32Table table;
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table.t[(c ^ p[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

void Writer::put_u32(std::uint32_t v) { buf_.append(reinterpret_cast<const char*>(&v), 4); }
void Writer::put_u64(std::uint64_t v) { buf_.append(reinterpret_cast<const char*>(&v), 8); }
void Writer::put_i32(std::int32_t v) { buf_.append(reinterpret_cast<const char*>(&v), 4); }
void Writer::put_f64(double v) { buf_.append(reinterpret_cast<const char*>(&v), 8); }

void Writer::put_string(const std::string& s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
}

void Writer::put_matrix(const Matrix& m) {
    put_u32(static_cast<std::uint32_t>(m.rows()));
    put_u32(static_cast<std::uint32_t>(m.cols()));
    buf_.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
}

void Writer::put_vector(const Vector& v) {
    put_u32(static_cast<std::uint32_t>(v.size()));
    buf_.append(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

void Writer::put_matrixf(const MatrixF& m) {
    put_u32(static_cast<std::uint32_t>(m.rows()));
    put_u32(static_cast<std::uint32_t>(m.cols()));
    buf_.append(reinterpret_cast<const char*>(m.data()), sizeof(float) * m.size());
}

const void* Reader::take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CorruptFileError("checkpoint payload truncated");
    const void* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
}

std::uint32_t Reader::get_u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
}

std::uint64_t Reader::get_u64() {
    std::uint64_t v;
    std::memcpy(&v, take(8), 8);
    return v;
}

std::int32_t Reader::get_i32() {
    std::int32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
}

double Reader::get_f64() {
    double v;
    std::memcpy(&v, take(8), 8);
    return v;
}

std::string Reader::get_string() {
    const std::uint32_t n = get_u32();
    const void* p = take(n);
    return std::string(static_cast<const char*>(p), n);
}

Matrix Reader::get_matrix() {
    const std::uint32_t rows = get_u32();
    const std::uint32_t cols = get_u32();
    Matrix m(rows, cols);
    std::memcpy(m.data(), take(sizeof(double) * m.size()), sizeof(double) * m.size());
    return m;
}

Vector Reader::get_vector() {
    const std::uint32_t n = get_u32();
    Vector v(n);
    std::memcpy(v.data(), take(sizeof(double) * n), sizeof(double) * n);
    return v;
}

MatrixF Reader::get_matrixf() {
    const std::uint32_t rows = get_u32();
    const std::uint32_t cols = get_u32();
    MatrixF m(rows, cols);
    std::memcpy(m.data(), take(sizeof(float) * m.size()), sizeof(float) * m.size());
    return m;
}

VectorF Reader::get_f32_block(std::size_t n) {
    VectorF v(static_cast<Eigen::Index>(n));
    std::memcpy(v.data(), take(sizeof(float) * n), sizeof(float) * n);
    return v;
}

namespace {
constexpr char kCheckpointMagic[4] = {'M', 'G', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const std::string& kind,
                     const std::string& payload) {
    Writer header;
    header.put_u32(kCheckpointVersion);
    header.put_string(kind);
    header.put_u64(payload.size());
    std::ofstream out = open_output(path);
    out.write(kCheckpointMagic, 4);
    out.write(header.bytes().data(), static_cast<std::streamsize>(header.bytes().size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    const std::uint32_t crc = crc32(payload.data(), payload.size());
    out.write(reinterpret_cast<const char*>(&crc), 4);
    if (!out) throw FormatError("failed writing checkpoint: " + path);
}

std::string load_checkpoint(const std::string& path, const std::string& expected_kind) {
    std::ifstream in = open_input(path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw CorruptFileError(path + ": not a checkpoint file (bad magic)");
    }
    Reader r(bytes);
    std::string kind;
    std::uint32_t version = 0;
    try {
        r.get_u32();  // magic
        version = r.get_u32();
        if (version == kCheckpointVersion) kind = r.get_string();
    } catch (const CorruptFileError&) {
        throw CorruptFileError(path + ": checkpoint truncated");
    }
    if (version != kCheckpointVersion) {
        throw VersionMismatchError(path + ": checkpoint version " + std::to_string(version) +
                                   ", expected " + std::to_string(kCheckpointVersion));
    }
    if (kind != expected_kind) {
        throw FormatError(path + ": checkpoint kind '" + kind + "', expected '" + expected_kind +
                          "'");
    }
    std::uint64_t payload_len = 0;
    try {
        payload_len = r.get_u64();
    } catch (const CorruptFileError&) {
        throw CorruptFileError(path + ": checkpoint truncated");
    }
    const std::size_t header_size = 4 + 4 + 4 + kind.size() + 8;
    if (bytes.size() < header_size + payload_len + 4) {
        throw CorruptFileError(path + ": checkpoint truncated");
    }
    std::string payload(bytes.data() + header_size, payload_len);
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + header_size + payload_len, 4);
    if (stored_crc != crc32(payload.data(), payload.size())) {
        throw CorruptFileError(path + ": checkpoint checksum mismatch");
    }
    return payload;
}

}  // namespace io

}  // namespace mgrec
