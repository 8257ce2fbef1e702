#pragma once

#include <memory>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "lm.hpp"

namespace seqctl {

// How head predictions around sentence k combine into one structural score.
struct StructuralMode {
  enum class Kind { LocalOnly, PastAware, FullSequence };
  Kind kind = Kind::FullSequence;
  double b = 0.33;  // discount base; weight of offset o is b^|o| with 0^0 = 1

  static const char* kind_name(Kind k);
  static Kind kind_from_name(const std::string& name);
};

struct DiscrimConfig {
  int window = 3;       // heads cover offsets -window..+window
  int label_width = 32;
  int ctx_layers = 2;
  int ctx_heads = 2;
  bool use_contextualizer = true;
  int head_hidden = 64;
  bool prefix_training = true;
  int epochs = 8;
  double lr = 1e-3;
  int batch_docs = 4;
  uint64_t seed = 2;

  void validate(int d_model) const;
  std::string to_json() const;
  static DiscrimConfig from_json(const std::string& text);
};

// Per-offset class predictions for one sentence index. Offsets pointing
// outside the document are masked (empty row, valid = false).
struct HeadPredictions {
  int window = 0;
  std::vector<std::vector<double>> logp;  // 2w+1 rows of C log-probabilities
  std::vector<bool> valid;

  const std::vector<double>& at_offset(int o) const { return logp[o + window]; }
  bool valid_offset(int o) const { return valid[o + window]; }
};

double combine_heads(const HeadPredictions& heads, const ControlPlan& plan, int k,
                     const StructuralMode& mode);

// Sequence-aware sentence classifier over the language model's hidden states.
//
// Word vectors are the frozen LM states of the flattened stream. Each sentence
// is pooled by a learned query (s_k); a small causal transformer over the
// pooled vectors plus sentence-position embeddings yields a_k (with
// use_contextualizer off, a_k = s_k and training examples stand each sentence
// alone, which is what the editing path scores). Teacher-forced labels c_{<j}
// are embedded and pooled per offset (h_{k,o}); 2w+1 feed-forward heads map
// [a_k ; h_{k,o}] to class log-probabilities.
class Discriminator {
 public:
  Discriminator(const DiscrimConfig& config, int d_model, int num_classes);

  const DiscrimConfig& config() const { return config_; }
  int d_model() const { return d_model_; }
  int num_classes() const { return num_classes_; }
  nn::ParamStore& params() { return params_; }
  const std::vector<double>& class_weights() const { return class_weights_; }
  uint64_t vocab_hash = 0;

  struct TrainReport {
    std::vector<double> epoch_ce;
    std::vector<double> dev_f1;  // macro-F1 per head, offset -w..+w
  };
  TrainReport train(const Corpus& train_corpus, const Corpus* dev_corpus,
                    const Lm& lm);

  // Class-weighted cross-entropy of every valid head for one evaluation,
  // averaged over heads. Accumulates parameter gradients scaled by grad_scale;
  // this is the per-sample unit the trainer batches over.
  double training_loss_and_grad(const Mat& h, const StreamLayout& layout,
                                const ControlPlan& plan, int k, double grad_scale);

  // Full-document scoring. The stream is the flattened prefix
  // X_{<k} plus the partial current sentence; k is 1-based.
  HeadPredictions predict_heads(const Lm& lm, const Vocabulary& vocab,
                                const std::vector<int>& stream,
                                const ControlPlan& plan, int k) const;
  double class_log_likelihood(const Lm& lm, const Vocabulary& vocab,
                              const std::vector<int>& stream, const ControlPlan& plan,
                              int k, const StructuralMode& mode) const;

  // Same scoring on caller-supplied hidden states (the HSC hook).
  HeadPredictions predict_heads_from_hidden(const Mat& h, const StreamLayout& layout,
                                            const ControlPlan& plan, int k) const;
  double score_from_hidden(const Mat& h, const StreamLayout& layout,
                           const ControlPlan& plan, int k,
                           const StructuralMode& mode) const;

  // Gradient of the structural cross-entropy L = -class_log_likelihood with
  // respect to every entry of the hidden states.
  Mat loss_grad_wrt_hidden(const Mat& h, const StreamLayout& layout,
                           const ControlPlan& plan, int k,
                           const StructuralMode& mode) const;

  std::string manifest(const std::string& extra_json = "{}") const;
  void save(const std::string& path, const std::string& extra_json = "{}") const;
  static Discriminator load(const std::string& path);
  static Discriminator from_checkpoint(const CheckpointData& data);

  // Rejects models trained against a different vocabulary or width.
  void check_compatible(const Lm& lm) const;

  static constexpr int kMaxSentences = 32;

 private:
  friend class StepScorer;
  struct CtxLayer {
    nn::Param *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    nn::Param *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };
  struct Head {
    nn::Param *w1, *b1, *w2, *b2;
  };
  struct Forward;  // full activation record for one (stream, k) evaluation

  void build_params();
  void run_forward(const Mat& h, const StreamLayout& layout, const ControlPlan& plan,
                   int k, Forward& fw) const;
  // dlogp indexed like HeadPredictions rows; zero rows for unused heads.
  // Accumulates parameter gradients unless frozen; writes dH when given.
  void run_backward(const Forward& fw, const std::vector<std::vector<double>>& dlogp,
                    bool frozen, Mat* dh) const;

  DiscrimConfig config_;
  int d_model_ = 0;
  int num_classes_ = 0;
  nn::ParamStore params_;
  std::vector<double> class_weights_;
  std::vector<double> dev_f1_;

  nn::Param* pool_q_ = nullptr;      // 1 x d learned pooling query
  nn::Param* sent_pos_ = nullptr;    // kMaxSentences x d
  std::vector<CtxLayer> ctx_layers_;
  nn::Param* ctx_ln_f_g_ = nullptr;
  nn::Param* ctx_ln_f_b_ = nullptr;
  nn::Param* label_emb_ = nullptr;   // C x label_width
  nn::Param* label_pos_ = nullptr;   // kMaxSentences x label_width
  nn::Param* label_empty_ = nullptr; // 1 x label_width
  nn::Param* label_q_ = nullptr;     // (2w+1) x label_width
  std::vector<Head> heads_;
};

// Builds the hidden states for a stream with the LM, then returns
// d(-class_log_likelihood)/dH under the given mode.
Mat grad_wrt_hidden(const Lm& lm, const Discriminator& disc, const Vocabulary& vocab,
                    const std::vector<int>& stream, const ControlPlan& plan, int k,
                    const StructuralMode& mode);

// Stream and layout for scoring one sentence on its own (<bos> then the
// sentence tokens). This is what the editing path and the contextualizer-free
// discriminator variant consume.
struct StandaloneStream {
  std::vector<int> stream;
  StreamLayout layout;
};
StandaloneStream standalone_sentence_stream(const std::vector<int>& tokens,
                                            const Vocabulary& vocab);

// Candidate scorer for one decode position. The stream prefix, plan, and
// sentence index are fixed; candidates differ only in the appended token's
// hidden row. Funnels through the same forward code as class_log_likelihood,
// so the numbers agree bit for bit.
class StepScorer {
 public:
  StepScorer(const Discriminator& disc, const Mat& h, const StreamLayout& layout,
             const ControlPlan& plan, int k, const StructuralMode& mode);
  ~StepScorer();

  // Score with the candidate's hidden row appended to the current sentence;
  // eos closes the sentence instead of extending it.
  double score(const double* candidate_h_row, bool candidate_is_eos);

 private:
  const Discriminator& disc_;
  StructuralMode mode_;
  ControlPlan plan_;
  int k_;
  int base_rows_ = 0;
  Mat h_buf_;  // stream hidden rows plus one candidate slot
  StreamLayout open_;       // candidate extends the current sentence
  double eos_score_ = 0.0;  // closing it scores the state as-is
  std::unique_ptr<Discriminator::Forward> fw_;
};

}  // namespace seqctl
