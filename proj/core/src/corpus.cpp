#include "langroute/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "langroute/errors.hpp"

namespace langroute {

std::string word_order_name(WordOrder o) {
  switch (o) {
    case WordOrder::kSVO: return "SVO";
    case WordOrder::kVSO: return "VSO";
    case WordOrder::kSOV: return "SOV";
  }
  throw ContractError("bad word order value");
}

WordOrder word_order_from_name(const std::string& name) {
  if (name == "SVO") return WordOrder::kSVO;
  if (name == "VSO") return WordOrder::kVSO;
  if (name == "SOV") return WordOrder::kSOV;
  throw DataError("unknown word order " + name);
}

Vocab::Vocab() {
  add("<pad>");
  add("<bos>");
  add("<eos>");
}

int Vocab::add(const std::string& word) {
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(words_.size());
  words_.push_back(word);
  index_[word] = id;
  return id;
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw DataError("word not in vocabulary: " + word);
  return it->second;
}

bool Vocab::contains(const std::string& word) const { return index_.count(word) != 0; }

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw ContractError("vocab id out of range");
  return words_[static_cast<std::size_t>(id)];
}

const Language& LanguageFamily::lang(const std::string& code) const {
  for (const Language& l : langs) {
    if (l.code == code) return l;
  }
  throw DataError("unknown language code " + code);
}

int LanguageFamily::lang_code_token(const std::string& code) const {
  return vocab.id("<" + code + ">");
}

const std::vector<InstructionTemplate>& instruction_templates() {
  static const std::vector<InstructionTemplate> kTemplates = {
      {0, "translate from {src_lang} to {tgt_lang} : {src_text} answer :"},
      {1, "{src_lang} sentence : {src_text} {tgt_lang} sentence :"},
      {2, "convert {src_text} from {src_lang} into {tgt_lang} :"},
      {3, "given {src_lang} text {src_text} produce {tgt_lang} :"},
      {4, "task translation {src_lang} {tgt_lang} input {src_text} output :"},
      {5, "please translate {src_text} from {src_lang} to {tgt_lang} now :"},
      {6, "source {src_lang} : {src_text} target {tgt_lang} :"},
      {7, "in {src_lang} they say {src_text} in {tgt_lang} say :"},
      {8, "rewrite {src_text} of {src_lang} as {tgt_lang} text :"},
      {9, "{src_text} is {src_lang} give the {tgt_lang} version :"},
  };
  return kTemplates;
}

namespace {

std::vector<std::string> split_ws(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// One base sentence in concept ids, held constituent-wise in canonical SVO order.
struct BaseSentence {
  std::vector<int> s, v, o;
  std::vector<int> flat() const {
    std::vector<int> all = s;
    all.insert(all.end(), v.begin(), v.end());
    all.insert(all.end(), o.begin(), o.end());
    return all;
  }
};

std::vector<int> order_constituents(const BaseSentence& b, WordOrder order) {
  std::vector<int> out;
  auto push = [&](const std::vector<int>& part) { out.insert(out.end(), part.begin(), part.end()); };
  switch (order) {
    case WordOrder::kSVO: push(b.s); push(b.v); push(b.o); break;
    case WordOrder::kVSO: push(b.v); push(b.s); push(b.o); break;
    case WordOrder::kSOV: push(b.s); push(b.o); push(b.v); break;
  }
  return out;
}

std::vector<int> encode_base(const LanguageFamily& fam, const Language& lang,
                             const BaseSentence& base) {
  std::vector<int> concepts = order_constituents(base, lang.word_order);
  std::vector<int> out;
  out.reserve(concepts.size());
  for (int c : concepts) {
    out.push_back(fam.surface_offset + lang.token_permutation[static_cast<std::size_t>(c)]);
  }
  return out;
}

}  // namespace

LanguageFamily make_language_family(int n_langs, int base_vocab, std::uint64_t seed) {
  if (n_langs < 2) throw ContractError("family needs at least 2 languages");
  if (base_vocab < 32) throw ContractError("base vocabulary must hold at least 32 words");
  LanguageFamily fam;
  fam.base_vocab = base_vocab;
  fam.n_nouns = base_vocab / 2;
  fam.n_verbs = base_vocab / 4;
  fam.seed = seed;

  for (const InstructionTemplate& t : instruction_templates()) {
    for (const std::string& w : split_ws(t.pattern)) {
      if (w != "{src_lang}" && w != "{tgt_lang}" && w != "{src_text}") fam.vocab.add(w);
    }
  }

  static const WordOrder kOrderCycle[6] = {WordOrder::kSVO, WordOrder::kVSO, WordOrder::kSVO,
                                           WordOrder::kSOV, WordOrder::kSVO, WordOrder::kSVO};
  for (int i = 0; i < n_langs; ++i) {
    Language l;
    l.code = std::string(2, static_cast<char>('a' + i % 26));
    if (i >= 26) l.code += std::to_string(i / 26);
    l.word_order = kOrderCycle[i % 6];
    l.token_permutation.resize(static_cast<std::size_t>(base_vocab));
    for (int c = 0; c < base_vocab; ++c) l.token_permutation[static_cast<std::size_t>(c)] = c;
    if (i > 0) {
      std::mt19937_64 rng(seed * 2654435761ull + static_cast<std::uint64_t>(i));
      std::shuffle(l.token_permutation.begin(), l.token_permutation.end(), rng);
    }
    fam.vocab.add("<" + l.code + ">");
    fam.langs.push_back(std::move(l));
  }

  fam.surface_offset = fam.vocab.size();
  for (int wi = 0; wi < base_vocab; ++wi) fam.vocab.add("w" + std::to_string(wi));
  return fam;
}

std::vector<ParallelExample> gen_parallel(const LanguageFamily& family, const std::string& src_lang,
                                          const std::string& tgt_lang, int n, std::uint64_t seed) {
  if (src_lang == tgt_lang) throw ContractError("pair must use two distinct languages");
  const Language& src = family.lang(src_lang);
  const Language& tgt = family.lang(tgt_lang);
  if (n < 0) throw ContractError("example count must be non-negative");

  // base sampling depends on the seed only, so (a,b) and (b,a) see the same sentences
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noun(0, family.n_nouns - 1);
  std::uniform_int_distribution<int> verb(family.n_nouns, family.n_nouns + family.n_verbs - 1);
  std::uniform_int_distribution<int> adj(family.n_nouns + family.n_verbs, family.base_vocab - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  auto noun_phrase = [&]() {
    std::vector<int> np;
    if (coin(rng) < 0.4) np.push_back(adj(rng));
    np.push_back(noun(rng));
    return np;
  };

  std::vector<ParallelExample> out;
  std::set<std::vector<int>> seen;
  long long attempts = 0;
  const long long max_attempts = 200LL * std::max(n, 1) + 1000;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > max_attempts) {
      throw DataError("sentence space exhausted generating " + std::to_string(n) + " examples");
    }
    BaseSentence base;
    base.s = noun_phrase();
    base.v = {verb(rng)};
    base.o = noun_phrase();
    if (!seen.insert(base.flat()).second) continue;
    ParallelExample ex;
    ex.src = encode_base(family, src, base);
    ex.tgt = encode_base(family, tgt, base);
    ex.src_lang = src_lang;
    ex.tgt_lang = tgt_lang;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<int> oracle_translate(const LanguageFamily& family, const std::string& src_lang,
                                  const std::string& tgt_lang, const std::vector<int>& src_tokens) {
  const Language& src = family.lang(src_lang);
  const Language& tgt = family.lang(tgt_lang);
  std::vector<int> inverse(static_cast<std::size_t>(family.base_vocab), 0);
  for (int c = 0; c < family.base_vocab; ++c) {
    inverse[static_cast<std::size_t>(src.token_permutation[static_cast<std::size_t>(c)])] = c;
  }

  // recover constituents: a noun closes its pending adjective run; verbs stand alone
  std::vector<std::vector<int>> nps;
  std::vector<int> verb_part, pending;
  for (int tok : src_tokens) {
    const int si = tok - family.surface_offset;
    if (si < 0 || si >= family.base_vocab) throw DataError("token outside the cipher vocabulary");
    const int c = inverse[static_cast<std::size_t>(si)];
    if (c < family.n_nouns) {
      pending.push_back(c);
      nps.push_back(pending);
      pending.clear();
    } else if (c < family.n_nouns + family.n_verbs) {
      if (!pending.empty()) throw DataError("malformed sentence: dangling adjective");
      verb_part.push_back(c);
    } else {
      pending.push_back(c);
    }
  }
  if (!pending.empty() || nps.size() != 2 || verb_part.empty()) {
    throw DataError("malformed sentence: expected subject, verb, object");
  }

  // subject precedes object in reading order under all three constituent orders
  BaseSentence base;
  base.s = nps[0];
  base.v = verb_part;
  base.o = nps[1];
  return encode_base(family, tgt, base);
}

BatchRow apply_template(const LanguageFamily& family, const ParallelExample& example,
                        int template_id, std::uint64_t seed, int max_len) {
  const auto& templates = instruction_templates();
  int tid = template_id;
  if (tid == -1) {
    std::mt19937_64 rng(seed);
    tid = static_cast<int>(rng() % templates.size());
  }
  if (tid < 0 || tid >= static_cast<int>(templates.size())) {
    throw ContractError("template id " + std::to_string(tid) + " out of range");
  }

  BatchRow row;
  row.tokens.push_back(Vocab::kBos);
  for (const std::string& w : split_ws(templates[static_cast<std::size_t>(tid)].pattern)) {
    if (w == "{src_lang}") {
      row.tokens.push_back(family.lang_code_token(example.src_lang));
    } else if (w == "{tgt_lang}") {
      row.tokens.push_back(family.lang_code_token(example.tgt_lang));
    } else if (w == "{src_text}") {
      row.tokens.insert(row.tokens.end(), example.src.begin(), example.src.end());
    } else {
      row.tokens.push_back(family.vocab.id(w));
    }
  }
  row.prompt_len = static_cast<std::int64_t>(row.tokens.size());
  row.tokens.insert(row.tokens.end(), example.tgt.begin(), example.tgt.end());
  row.tokens.push_back(Vocab::kEos);
  row.mask.assign(row.tokens.size(), 0);
  for (std::size_t p = static_cast<std::size_t>(row.prompt_len); p < row.tokens.size(); ++p) {
    row.mask[p] = 1;
  }
  if (static_cast<int>(row.tokens.size()) > max_len) {
    throw DataError("templated row length " + std::to_string(row.tokens.size()) +
                    " exceeds limit " + std::to_string(max_len));
  }
  return row;
}

BatchRow lm_row(const std::vector<int>& tokens) {
  if (tokens.empty()) throw ContractError("lm_row: empty token list");
  BatchRow row;
  row.tokens.push_back(Vocab::kBos);
  row.tokens.insert(row.tokens.end(), tokens.begin(), tokens.end());
  row.tokens.push_back(Vocab::kEos);
  row.prompt_len = 1;
  row.mask.assign(row.tokens.size(), 1);
  row.mask[0] = 0;
  return row;
}

Batch rows_to_batch(const std::vector<BatchRow>& rows, const std::string& pair_tag) {
  if (rows.empty()) throw ContractError("cannot batch zero rows");
  std::int64_t width = 0;
  for (const BatchRow& r : rows) {
    width = std::max(width, static_cast<std::int64_t>(r.tokens.size()));
  }
  Batch b;
  b.rows = static_cast<std::int64_t>(rows.size());
  b.cols = width;
  b.pair = pair_tag;
  b.tokens.assign(static_cast<std::size_t>(b.rows * width), Vocab::kPad);
  b.mask.assign(static_cast<std::size_t>(b.rows * width), 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].tokens.size(); ++c) {
      b.tokens[r * static_cast<std::size_t>(width) + c] = rows[r].tokens[c];
      b.mask[r * static_cast<std::size_t>(width) + c] = rows[r].mask[c];
    }
  }
  return b;
}

std::pair<std::string, std::string> split_pair_tag(const std::string& pair) {
  const std::size_t dash = pair.find('-');
  if (dash == std::string::npos || dash == 0 || dash + 1 >= pair.size() ||
      pair.find('-', dash + 1) != std::string::npos) {
    throw DataError("pair tag must be <src>-<tgt>: " + pair);
  }
  return {pair.substr(0, dash), pair.substr(dash + 1)};
}

TsvLoadResult load_parallel_tsv(const std::string& path, Vocab& vocab, int max_side_len) {
  TsvLoadResult res;
  std::string stem = path;
  const std::size_t slash = stem.find_last_of('/');
  if (slash != std::string::npos) stem = stem.substr(slash + 1);
  const std::size_t dot = stem.find('.');
  if (dot != std::string::npos) stem = stem.substr(0, dot);
  const std::size_t dash = stem.find('-');
  if (dash == std::string::npos || stem.find('-', dash + 1) != std::string::npos) {
    throw DataError("cannot parse language pair from filename " + path);
  }
  res.src_lang = stem.substr(0, dash);
  res.tgt_lang = stem.substr(dash + 1);
  if (res.src_lang.empty() || res.tgt_lang.empty()) {
    throw DataError("cannot parse language pair from filename " + path);
  }

  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw DataError("line " + std::to_string(line_no) + ": expected exactly one tab");
    }
    std::vector<std::string> src_words = split_ws(line.substr(0, tab));
    std::vector<std::string> tgt_words = split_ws(line.substr(tab + 1));
    if (src_words.empty() || tgt_words.empty() ||
        static_cast<int>(src_words.size()) > max_side_len ||
        static_cast<int>(tgt_words.size()) > max_side_len) {
      ++res.skipped;
      continue;
    }
    ParallelExample ex;
    ex.src_lang = res.src_lang;
    ex.tgt_lang = res.tgt_lang;
    for (const std::string& w : src_words) ex.src.push_back(vocab.add(w));
    for (const std::string& w : tgt_words) ex.tgt.push_back(vocab.add(w));
    res.examples.push_back(std::move(ex));
  }
  return res;
}

void save_parallel_tsv(const std::vector<ParallelExample>& examples, const Vocab& vocab,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const ParallelExample& ex : examples) {
    for (std::size_t i = 0; i < ex.src.size(); ++i) {
      if (i) out << ' ';
      out << vocab.word(ex.src[i]);
    }
    out << '\t';
    for (std::size_t i = 0; i < ex.tgt.size(); ++i) {
      if (i) out << ' ';
      out << vocab.word(ex.tgt[i]);
    }
    out << '\n';
  }
}

std::string family_to_json(const LanguageFamily& family) {
  nlohmann::json j;
  j["base_vocab"] = family.base_vocab;
  j["n_nouns"] = family.n_nouns;
  j["n_verbs"] = family.n_verbs;
  j["seed"] = family.seed;
  j["surface_offset"] = family.surface_offset;
  j["vocab"] = family.vocab.words();
  j["langs"] = nlohmann::json::array();
  for (const Language& l : family.langs) {
    j["langs"].push_back({{"code", l.code},
                          {"word_order", word_order_name(l.word_order)},
                          {"permutation", l.token_permutation}});
  }
  return j.dump(2);
}

LanguageFamily family_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("family file is not valid JSON: ") + e.what());
  }
  LanguageFamily fam;
  try {
    fam.base_vocab = j.at("base_vocab").get<int>();
    fam.n_nouns = j.at("n_nouns").get<int>();
    fam.n_verbs = j.at("n_verbs").get<int>();
    fam.seed = j.at("seed").get<std::uint64_t>();
    fam.surface_offset = j.at("surface_offset").get<int>();
    const auto words = j.at("vocab").get<std::vector<std::string>>();
    for (std::size_t i = 3; i < words.size(); ++i) fam.vocab.add(words[i]);
    if (fam.vocab.words() != words) throw DataError("family vocabulary is inconsistent");
    for (const auto& lj : j.at("langs")) {
      Language l;
      l.code = lj.at("code").get<std::string>();
      l.word_order = word_order_from_name(lj.at("word_order").get<std::string>());
      l.token_permutation = lj.at("permutation").get<std::vector<int>>();
      if (static_cast<int>(l.token_permutation.size()) != fam.base_vocab) {
        throw DataError("permutation size mismatch for language " + l.code);
      }
      fam.langs.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("family file missing fields: ") + e.what());
  }
  return fam;
}

}  // namespace langroute
