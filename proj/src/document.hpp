#pragma once

#include <vector>

#include "schema.hpp"
#include "vocab.hpp"

namespace seqctl {

// One sentence: terminator-free token ids plus its class index. The headline
// carries tag -1 (ignored).
struct Sentence {
  std::vector<int> tokens;
  int tag = -1;

  int length() const { return static_cast<int>(tokens.size()); }
};

struct Document {
  Sentence headline;
  std::vector<Sentence> body;

  int num_sentences() const { return static_cast<int>(body.size()); }
  int token_count() const;  // headline + body tokens (no terminators)
};

// Input contract for generation: a headline and one control code per sentence
// to produce. Adjacent codes may repeat.
struct ControlPlan {
  Sentence headline;
  std::vector<int> tags;

  int length() const { return static_cast<int>(tags.size()); }
};

void validate_document(const Document& doc, const Vocabulary& vocab, int num_classes);
void validate_plan(const ControlPlan& plan, const Vocabulary& vocab, int num_classes);

// ---------------------------------------------------------------------------
// Flattened token streams
//
// The model-facing form of a document is a single stream:
//   <bos> headline <eos> sent_1 <eos> sent_2 <eos> ... sent_S <eos>
// Every sentence (headline included) is closed by one <eos>; decoding advances
// the control-code index on each emitted <eos>.
// ---------------------------------------------------------------------------

std::vector<int> flatten_document(const Document& doc, const Vocabulary& vocab);
// Stream for headline plus the first k complete body sentences.
std::vector<int> flatten_prefix(const Document& doc, int k, const Vocabulary& vocab);

// Token spans (terminators excluded) recovered from a flattened stream. Once
// the stream extends past the headline it always ends in an in-progress body
// span, which is empty right after an <eos>.
struct StreamLayout {
  struct Span {
    int begin = 0, end = 0;  // [begin, end) in the stream
    int length() const { return end - begin; }
  };
  Span headline;
  std::vector<Span> body;
  bool last_complete = true;  // false when the last body span is in progress

  // Number of fully terminated body sentences.
  int complete_sentences() const {
    return static_cast<int>(body.size()) - (last_complete ? 0 : 1);
  }
};

StreamLayout parse_stream(const std::vector<int>& stream, const Vocabulary& vocab);

ControlPlan plan_from_document(const Document& doc);

}  // namespace seqctl
