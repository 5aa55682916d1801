// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>

#include "mgrec/seqrec.hpp"

namespace mgrec {

void PrefixTrie::insert(const std::vector<int>& seq) {
    int node = kRoot;
    for (int token : seq) {
        auto& children = nodes_[static_cast<std::size_t>(node)].children;
        const auto it = children.find(token);
        if (it == children.end()) {
            const int next = static_cast<int>(nodes_.size());
            children.emplace(token, next);
            nodes_.emplace_back();
            node = next;
        } else {
            node = it->second;
        }
    }
    if (!nodes_[static_cast<std::size_t>(node)].terminal) {
        nodes_[static_cast<std::size_t>(node)].terminal = true;
        ++sequences_;
    }
}

bool PrefixTrie::contains(const std::vector<int>& seq) const {
    int node = kRoot;
    for (int token : seq) {
        node = child(node, token);
        if (node < 0) return false;
    }
    return terminal(node);
}

int PrefixTrie::child(int node, int token) const {
    const auto& children = nodes_[static_cast<std::size_t>(node)].children;
    const auto it = children.find(token);
    return it == children.end() ? -1 : it->second;
}

const std::map<int, int>& PrefixTrie::children(int node) const {
    return nodes_[static_cast<std::size_t>(node)].children;
}

bool PrefixTrie::terminal(int node) const {
    return nodes_[static_cast<std::size_t>(node)].terminal;
}

PrefixTrie build_prefix_trie(const std::map<std::string, std::vector<int>>& target_sequences) {
    PrefixTrie trie;
    for (const auto& [item, seq] : target_sequences) trie.insert(seq);
    return trie;
}

namespace {

struct Beam {
    std::vector<int> tokens;
    double logp = 0.0;
    int node = PrefixTrie::kRoot;  // constrained mode only
    bool finished = false;
};

bool beam_order(const Beam& a, const Beam& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    return a.tokens < b.tokens;
}

}  // namespace

std::vector<BeamHypothesis> beam_search(const Seq2SeqModel& model, const std::vector<int>& source,
                                        int beam_width, const PrefixTrie* trie, int max_len) {
    if (beam_width < 1) throw Error("beam_search: beam_width must be >= 1");
    if (max_len < 1) throw Error("beam_search: max_len must be >= 1");
    const int eos = 2;
    const Seq2SeqModel::Encoded enc = model.encode(source);

    std::vector<Beam> beams{Beam{}};
    for (int step = 0; step < max_len; ++step) {
        bool any_live = false;
        std::vector<Beam> candidates;
        for (const Beam& beam : beams) {
            if (beam.finished) {
                candidates.push_back(beam);
                continue;
            }
            any_live = true;
            const Vector logprobs = model.next_token_logprobs(enc, beam.tokens);
            if (trie != nullptr) {
                const auto& children = trie->children(beam.node);
                if (children.empty()) {
                    throw Error("beam_search: trie node has no continuation and is not terminal");
                }
                for (const auto& [token, child] : children) {
                    Beam next = beam;
                    next.tokens.push_back(token);
                    next.logp += logprobs[token];
                    next.node = child;
                    next.finished = trie->terminal(child);
                    candidates.push_back(std::move(next));
                }
            } else {
                for (int token = 0; token < model.config().vocab_size; ++token) {
                    Beam next = beam;
                    next.tokens.push_back(token);
                    next.logp += logprobs[token];
                    next.finished = token == eos;
                    candidates.push_back(std::move(next));
                }
            }
        }
        if (!any_live) break;
        std::sort(candidates.begin(), candidates.end(), beam_order);
        if (static_cast<int>(candidates.size()) > beam_width) {
            candidates.resize(static_cast<std::size_t>(beam_width));
        }
        beams = std::move(candidates);
    }

    std::vector<BeamHypothesis> out;
    out.reserve(beams.size());
    for (Beam& beam : beams) {
        if (trie != nullptr && !beam.finished) continue;  // depth exceeded max_len
        out.push_back({std::move(beam.tokens), beam.logp});
    }
    return out;
}

std::vector<int> greedy_decode(const Seq2SeqModel& model, const std::vector<int>& source,
                               int max_len, const PrefixTrie* trie) {
    const std::vector<BeamHypothesis> hyps = beam_search(model, source, 1, trie, max_len);
    if (hyps.empty()) throw Error("greedy_decode: no hypothesis");
    return hyps.front().tokens;
}

}  // namespace mgrec
