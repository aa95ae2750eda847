#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "langroute/model.hpp"

namespace langroute {

enum class WordOrder { kSVO, kVSO, kSOV };

std::string word_order_name(WordOrder o);
WordOrder word_order_from_name(const std::string& name);

// A cipher language: a permutation over the shared concept vocabulary plus a
// constituent order. Translation between any two languages is exact.
struct Language {
  std::string code;
  std::vector<int> token_permutation;  // concept id -> surface word index
  WordOrder word_order = WordOrder::kSVO;
};

// Shared vocabulary: specials, template words, language code tokens, surface words.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  Vocab();
  int add(const std::string& word);
  int id(const std::string& word) const;  // DataError if unknown
  bool contains(const std::string& word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

struct LanguageFamily {
  std::vector<Language> langs;
  int base_vocab = 0;
  int n_nouns = 0;
  int n_verbs = 0;  // adjectives fill the remainder of the concept range
  Vocab vocab;
  int surface_offset = 0;  // vocab id of surface word index 0
  std::uint64_t seed = 0;

  const Language& lang(const std::string& code) const;
  int lang_code_token(const std::string& code) const;  // id of "<code>"
  int surface_word_count() const { return base_vocab; }
};

struct ParallelExample {
  std::vector<int> src;  // vocab ids
  std::vector<int> tgt;
  std::string src_lang;
  std::string tgt_lang;
};

struct InstructionTemplate {
  int id = 0;
  std::string pattern;  // contains {src_lang} {tgt_lang} {src_text} once each
};

const std::vector<InstructionTemplate>& instruction_templates();

// One model-input row before batching. prompt_len marks where the target
// segment begins; the mask is true exactly on the target tokens and the
// terminator.
struct BatchRow {
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;
  std::int64_t prompt_len = 0;
};

LanguageFamily make_language_family(int n_langs, int base_vocab, std::uint64_t seed);

// Lang 0 carries the identity permutation; word orders cycle through a fixed
// SVO-heavy mix with one VSO and one SOV member.
std::vector<ParallelExample> gen_parallel(const LanguageFamily& family,
                                          const std::string& src_lang, const std::string& tgt_lang,
                                          int n, std::uint64_t seed);

// Exact reference translation via the shared concept space.
std::vector<int> oracle_translate(const LanguageFamily& family, const std::string& src_lang,
                                  const std::string& tgt_lang, const std::vector<int>& src_tokens);

// template_id in [0,9], or -1 to draw one from seed.
BatchRow apply_template(const LanguageFamily& family, const ParallelExample& example,
                        int template_id, std::uint64_t seed, int max_len);

// Plain language-modeling row: <bos> tokens <eos>, every predicted position in the loss.
BatchRow lm_row(const std::vector<int>& tokens);

// Pad rows to a common width and stack. Pads are excluded from the loss.
Batch rows_to_batch(const std::vector<BatchRow>& rows, const std::string& pair_tag);

// "src-tgt" with exactly one separator and nonempty sides, else DataError.
std::pair<std::string, std::string> split_pair_tag(const std::string& pair);

struct TsvLoadResult {
  std::vector<ParallelExample> examples;
  int skipped = 0;  // empty-side or over-length lines
  std::string src_lang;
  std::string tgt_lang;
};

// One pair per line, exactly one tab; the filename stem (up to the first dot)
// names the pair as "src-tgt". New words extend the vocabulary.
TsvLoadResult load_parallel_tsv(const std::string& path, Vocab& vocab, int max_side_len = 64);

void save_parallel_tsv(const std::vector<ParallelExample>& examples, const Vocab& vocab,
                       const std::string& path);

std::string family_to_json(const LanguageFamily& family);
LanguageFamily family_from_json(const std::string& json_text);

}  // namespace langroute
