// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mgrec/rng.hpp"
#include "mgrec/sid.hpp"
#include "mgrec/types.hpp"

namespace mgrec {

struct ModelConfig {
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 4;
    int width = 128;
    int ff = 256;
    double dropout = 0.1;
    int max_source_len = 256;
    int max_target_len = 32;
    int vocab_size = 0;
    std::uint64_t seed = 7;

    void validate() const;
};

struct TrainSchedule {
    int align_steps = 0;  // phase A (alignment pretraining)
    int rec_steps = 1000;  // phase B (recommendation)
    int batch_size = 32;
    int align_batch_size = 0;  // phase-A batch (alignment sequences are short); 0: batch_size
    double lr = 1e-3;
    double align_lr = 0.0;  // phase-A learning rate; 0: lr
    int warmup_steps = 100;
    double weight_decay = 0.01;
    bool mix = false;  // interleave both objectives in a single phase
    std::uint64_t seed = 7;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Tensor {
    std::string name;
    Matrix value;
    Matrix grad;
    bool decay = true;  // weight decay applies (matrices yes, biases/norms no)
};

class ParamStore {
public:
    int add(std::string name, Eigen::Index rows, Eigen::Index cols, bool decay);
    Tensor& operator[](int i) { return tensors_[static_cast<std::size_t>(i)]; }
    const Tensor& operator[](int i) const { return tensors_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return tensors_.size(); }
    void zero_grads();
    std::size_t parameter_count() const;

private:
    std::vector<Tensor> tensors_;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Pre-norm encoder-decoder transformer over token ids, trained with teacher
/// forcing. Sinusoidal positions, GELU feed-forward, zero-initialized output
/// head, input embeddings shared between encoder and decoder.
class Seq2SeqModel {
public:
    explicit Seq2SeqModel(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// Mean token-level cross-entropy of the batch targets under teacher
    /// forcing (PAD labels masked out). With `train` set, gradients are
    /// accumulated into the parameter store; `dropout_rng` drives the masks.
    double forward_loss(const std::vector<const SequenceExample*>& batch, bool train,
                        Rng* dropout_rng = nullptr);

    struct Encoded {
        Matrix memory;  // source length x width, after the final encoder norm
    };
    Encoded encode(const std::vector<int>& source) const;

    /// log softmax over the vocabulary for the token following `prefix`
    /// (prefix excludes BOS; BOS is prepended internally).
    Vector next_token_logprobs(const Encoded& enc, const std::vector<int>& prefix) const;

    /// Argmax token at every target position under teacher forcing.
    std::vector<int> teacher_forced_argmax(const Encoded& enc,
                                           const std::vector<int>& target) const;

    std::string payload() const;
    static Seq2SeqModel from_payload(const std::string& payload);

    // Parameter-index bookkeeping (public so the optimizer and tests can
    // iterate generically; treat as read-only).
    struct LnRef {
        int gain = -1, bias = -1;
    };
    struct AttnRef {
        int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
    };
    struct FfRef {
        int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
    };
    struct EncLayerRef {
        LnRef ln1;
        AttnRef attn;
        LnRef ln2;
        FfRef ff;
    };
    struct DecLayerRef {
        LnRef ln1;
        AttnRef self_attn;
        LnRef ln2;
        AttnRef cross_attn;
        LnRef ln3;
        FfRef ff;
    };

private:
    void build(bool init);
    friend struct ModelOps;

    ModelConfig config_;
    ParamStore params_;
    int embedding_ = -1;
    std::vector<EncLayerRef> enc_layers_;
    std::vector<DecLayerRef> dec_layers_;
    LnRef enc_final_;
    LnRef dec_final_;
    int out_w_ = -1, out_b_ = -1;
    Matrix positions_;  // sinusoidal, not learned
};

void save_model(const Seq2SeqModel& model, const std::string& path);  // kind "model"
Seq2SeqModel load_model(const std::string& path);

// ---------------------------------------------------------------------------
// Optimizer & training loop
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay and linear learning-rate warmup.
class AdamW {
public:
    AdamW(ParamStore& params, double lr, double weight_decay, int warmup_steps);
    void step();
    int steps_taken() const { return t_; }

private:
    ParamStore& params_;
    double lr_, weight_decay_;
    int warmup_steps_;
    int t_ = 0;
    std::vector<Matrix> m_, v_;
};

struct LossPoint {
    int step = 0;
    char phase = 'B';  // 'A' alignment, 'B' recommendation, 'M' mixed
    double loss = 0.0;
};

/// Aborts training when the loss exceeds 10x the first step's loss for 100
/// consecutive steps.
class DivergenceGuard {
public:
    /// Feeds one loss value; returns true when training should abort.
    bool update(double loss) {
        if (!have_initial_) {
            initial_ = loss;
            have_initial_ = true;
            return false;
        }
        if (loss > 10.0 * initial_) {
            ++streak_;
        } else {
            streak_ = 0;
        }
        return streak_ >= 100;
    }
    double initial() const { return initial_; }

private:
    double initial_ = 0.0;
    bool have_initial_ = false;
    int streak_ = 0;
};

struct TrainResult {
    std::vector<LossPoint> curve;
};

/// Two-phase schedule: phase A on alignment examples, then phase B on
/// recommendation examples with fresh optimizer state. `mix` folds both pools
/// into one phase. Batch order is a pure function of the schedule seed.
TrainResult train(Seq2SeqModel& model, const std::vector<SequenceExample>& align_examples,
                  const std::vector<SequenceExample>& rec_examples, const TrainSchedule& schedule,
                  bool verbose = false);

void write_losscurve(const TrainResult& result, const std::string& path);

// ---------------------------------------------------------------------------
// Constrained decoding
// ---------------------------------------------------------------------------

/// Token trie over the catalog's valid target sequences.
class PrefixTrie {
public:
    PrefixTrie() : nodes_(1) {}

    void insert(const std::vector<int>& seq);
    bool contains(const std::vector<int>& seq) const;

    static constexpr int kRoot = 0;
    int child(int node, int token) const;  // -1 when absent
    const std::map<int, int>& children(int node) const;
    bool terminal(int node) const;
    std::size_t node_count() const { return nodes_.size(); }
    std::size_t sequence_count() const { return sequences_; }

private:
    struct Node {
        std::map<int, int> children;
        bool terminal = false;
    };
    std::vector<Node> nodes_;
    std::size_t sequences_ = 0;
};

PrefixTrie build_prefix_trie(const std::map<std::string, std::vector<int>>& target_sequences);

struct BeamHypothesis {
    std::vector<int> tokens;  // includes the final EOS when emitted
    double logp = 0.0;
};

/// Length-synchronized beam search. A hypothesis is finished once it emits
/// EOS (or reaches a terminal trie node); unfinished beams are truncated at
/// `max_len`. With a trie, successors are restricted to the children of the
/// current node and every returned sequence is a complete catalog sequence.
/// Ranking is by total log-probability, ties broken lexicographically.
std::vector<BeamHypothesis> beam_search(const Seq2SeqModel& model, const std::vector<int>& source,
                                        int beam_width, const PrefixTrie* trie, int max_len);

std::vector<int> greedy_decode(const Seq2SeqModel& model, const std::vector<int>& source,
                               int max_len, const PrefixTrie* trie = nullptr);

}  // namespace mgrec
