#pragma once

#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "nn.hpp"

namespace seqctl {

struct LmConfig {
  int layers = 2;
  int heads = 2;
  int d_model = 64;
  int context = 512;
  double lr = 2e-3;
  int epochs = 30;
  int batch_docs = 8;
  uint64_t seed = 1;

  void validate() const;
  std::string to_json() const;
  static LmConfig from_json(const std::string& text);
};

// Pre-norm causal transformer over the flattened document stream. The hidden
// states H are the post-final-norm vectors; the output head is a plain linear
// map on top of them, so logits factor exactly as head(hidden_states(ctx)).
class Lm {
 public:
  Lm(const LmConfig& config, int vocab_size);

  const LmConfig& config() const { return config_; }
  int vocab_size() const { return vocab_size_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  uint64_t vocab_hash = 0;  // recorded at train time, checked on compose

  struct TrainReport {
    std::vector<double> epoch_ce;  // mean train cross-entropy per epoch
    double dev_perplexity = 0.0;
  };
  // Deterministic given config.seed. Aborts with diagnostics when the loss
  // goes non-finite. Weights are rounded through float32 on completion so
  // scoring matches a saved-and-reloaded model bit for bit.
  TrainReport train(const Corpus& train_corpus, const Corpus* dev_corpus);

  std::vector<double> next_token_logits(const std::vector<int>& ctx) const;
  Mat hidden_states(const std::vector<int>& ctx) const;  // T x d
  // Output head applied to the last row of H.
  std::vector<double> logits_from_hidden(const Mat& H) const;
  double perplexity(const std::vector<int>& ids) const;
  double sequence_nll(const std::vector<int>& ids) const;  // summed, natural log

  // d(loss)/d(input embedding rows) given d(loss)/dH, holding weights fixed.
  // Both are T x d. Used by gradient saliency.
  Mat backward_to_embeddings(const std::vector<int>& ctx, const Mat& dH) const;

  std::string manifest(const std::string& extra_json = "{}") const;
  void save(const std::string& path, const std::string& extra_json = "{}") const;
  static Lm load(const std::string& path);
  static Lm from_checkpoint(const CheckpointData& data);

 private:
  friend class LmSession;
  struct Layer {
    nn::Param *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    nn::Param *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };
  struct Workspace;

  void build_params();
  void forward(const std::vector<int>& ctx, Workspace& ws) const;
  // Pushes gradients from dH down to embeddings; accumulates parameter
  // gradients unless frozen, and writes input-embedding gradients when
  // d_emb is non-null.
  void backward(const Workspace& ws, const Mat& dH, bool frozen, Mat* d_emb) const;
  double doc_loss_and_grad(const std::vector<int>& ids, double scale);
  Mat logp_rows(const std::vector<int>& ctx) const;  // T x V log-softmax rows

  LmConfig config_;
  int vocab_size_ = 0;
  nn::ParamStore params_;
  std::vector<Layer> layers_;
  nn::Param* tok_emb_ = nullptr;
  nn::Param* pos_emb_ = nullptr;
  nn::Param* ln_f_g_ = nullptr;
  nn::Param* ln_f_b_ = nullptr;
  nn::Param* out_w_ = nullptr;
  nn::Param* out_b_ = nullptr;
};

// Incremental decoder state with per-layer key/value caches. Computation per
// position is identical, op for op, to the batch forward pass, so logits and
// hidden rows match Lm::next_token_logits / hidden_states exactly.
class LmSession {
 public:
  explicit LmSession(const Lm& lm);

  int length() const { return length_; }
  void push(int token);
  // Hidden row and next-token logits as if `token` were pushed; no state change.
  struct Peek {
    std::vector<double> hidden;
    std::vector<double> logits;
  };
  Peek peek(int token);

  const Mat& hidden() const { return hidden_; }            // length x d
  const std::vector<double>& logits() const { return logits_; }  // after last push

 private:
  void step(int token, bool commit, std::vector<double>* h_out,
            std::vector<double>* logits_out);

  const Lm& lm_;
  int length_ = 0;
  std::vector<Mat> k_cache_, v_cache_;  // per layer, capacity context x d
  Mat hidden_;
  std::vector<double> logits_;
};

}  // namespace seqctl
