#pragma once

#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace seqctl {

// A sentence with some word positions replaced by sentinel span markers.
// Adjacent masked positions collapse into one sentinel, so a span can cover
// several words.
struct MaskedSentence {
  std::vector<int> tokens;     // sentence with sentinels standing in for spans
  std::vector<int> original;   // the unmasked sentence
  std::vector<int> positions;  // masked word positions, ascending, unique
  int spans = 0;               // sentinels used: <m0> .. <m{spans-1}>
};

// positions index into sentence; duplicates or out-of-range entries are
// errors. Empty positions give back the sentence unchanged with zero spans.
MaskedSentence mask_sentence(const std::vector<int>& sentence,
                             const std::vector<int>& positions,
                             const Vocabulary& vocab);
// Replaces sentinel i with spans[i]; feeding the original span contents back
// reproduces the source sentence exactly.
std::vector<int> restore_sentence(const MaskedSentence& masked,
                                  const std::vector<std::vector<int>>& spans,
                                  const Vocabulary& vocab);
// The span contents the sentinels replaced, in order.
std::vector<std::vector<int>> gold_spans(const MaskedSentence& masked,
                                         const Vocabulary& vocab);

// Encoder input serialization: <lb> <c{tag}> <tx> masked-sentence. <lb> and
// <tx> play the "label:" / "text:" roles of the training template.
std::vector<int> render_infill_template(const MaskedSentence& masked, int tag,
                                        const Vocabulary& vocab);
struct ParsedInfillTemplate {
  int tag = -1;
  std::vector<int> tokens;  // masked sentence, sentinels included
};
ParsedInfillTemplate parse_infill_template(const std::vector<int>& ids,
                                           const Vocabulary& vocab);

// Decoder target serialization: <m0> span0 <m1> span1 ... (terminator
// excluded; training appends <eos>). Zero spans give an empty target.
std::vector<int> infill_target(const MaskedSentence& masked,
                               const Vocabulary& vocab);
// Splits a target back into span contents. Content before <m0> and sentinels
// out of order are format errors.
std::vector<std::vector<int>> parse_infill_target(const std::vector<int>& target,
                                                  int spans,
                                                  const Vocabulary& vocab);

// Word positions the editor may mask: every category except topic and entity.
std::vector<int> maskable_positions(const std::vector<int>& sentence,
                                    const Vocabulary& vocab);

struct InfillerConfig {
  int layers = 1;  // encoder depth = decoder depth
  int heads = 2;
  int d_model = 64;
  int enc_context = 96;
  int dec_context = 64;
  double lr = 2e-3;
  int epochs = 12;
  int batch_pairs = 16;
  int pairs_per_sentence = 2;
  int max_span_tokens = 8;  // sampling cut-off per span
  uint64_t seed = 3;

  void validate() const;
  std::string to_json() const;
  static InfillerConfig from_json(const std::string& text);
};

struct InfillPair {
  std::vector<int> tmpl;
  std::vector<int> target;
  int tag = 0;
  int spans = 0;
};

// Training pairs: each body sentence with a maskable word is masked
// pairs_per_sentence times, cycling mask fractions 15/30/45% of its maskable
// positions (at least one word). Deterministic given the generator state.
std::vector<InfillPair> build_infill_pairs(const Corpus& corpus,
                                           const InfillerConfig& config, Rng& rng);

// Label-aware span infiller: a small pre-norm transformer encoder over the
// serialized template and a causal decoder with cross-attention that emits
// the masked spans. Token embeddings are shared between the two stacks.
class Infiller {
 public:
  Infiller(const InfillerConfig& config, int vocab_size);

  const InfillerConfig& config() const { return config_; }
  int vocab_size() const { return vocab_size_; }
  nn::ParamStore& params() { return params_; }
  uint64_t vocab_hash = 0;

  struct TrainReport {
    std::vector<double> epoch_ce;  // mean CE per target token
    double dev_ce = 0.0;
  };
  TrainReport train(const Corpus& train_corpus, const Corpus* dev_corpus);

  // Summed cross-entropy of target followed by <eos>, teacher forced.
  double pair_nll(const std::vector<int>& tmpl, const std::vector<int>& target,
                  const Vocabulary& vocab) const;

  // Raw next-token logits after <bos> + dec_prefix, conditioned on tmpl.
  std::vector<double> next_logits(const std::vector<int>& tmpl,
                                  const std::vector<int>& dec_prefix,
                                  const Vocabulary& vocab) const;

  // Samples contents for every sentinel span in the template. The sentinel
  // skeleton is enforced structurally: within span i only ordinary tokens and
  // the closing marker (<m{i+1}>, or <eos> for the last span) can be drawn,
  // and a span is cut at max_span_tokens. Always returns exactly `spans`
  // lists, possibly empty.
  std::vector<std::vector<int>> sample_spans(const std::vector<int>& tmpl,
                                             int spans, double temperature,
                                             const Vocabulary& vocab,
                                             Rng& rng) const;

  std::string manifest(const std::string& extra_json = "{}") const;
  void save(const std::string& path, const std::string& extra_json = "{}") const;
  static Infiller load(const std::string& path);
  static Infiller from_checkpoint(const CheckpointData& data);

 private:
  struct Workspace;

  void build_params();
  void encode(const std::vector<int>& ids, Workspace& ws) const;
  void decode(const std::vector<int>& ids, Workspace& ws) const;
  // CE against labels with parameter-gradient accumulation scaled by `scale`.
  double loss_and_grad(const InfillPair& pair, const Vocabulary& vocab,
                       double scale);
  void backward(const Workspace& ws, const Mat& dHd);
  std::vector<double> logits_row(const Workspace& ws, int t) const;

  InfillerConfig config_;
  int vocab_size_ = 0;
  nn::ParamStore params_;

  struct Block {
    nn::Param *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    nn::Param *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };
  struct DecBlock {
    Block self;  // ln1 + causal self-attention, ln2 + mlp
    nn::Param *lnx_g, *lnx_b;  // pre-norm for the cross branch
    nn::Param *cwq, *cbq, *cwk, *cbk, *cwv, *cbv, *cwo, *cbo;
  };

  nn::Param* tok_emb_ = nullptr;
  nn::Param* enc_pos_ = nullptr;
  nn::Param* dec_pos_ = nullptr;
  std::vector<Block> enc_layers_;
  nn::Param* enc_ln_g_ = nullptr;
  nn::Param* enc_ln_b_ = nullptr;
  std::vector<DecBlock> dec_layers_;
  nn::Param* dec_ln_g_ = nullptr;
  nn::Param* dec_ln_b_ = nullptr;
  nn::Param* out_w_ = nullptr;
  nn::Param* out_b_ = nullptr;
};

}  // namespace seqctl
