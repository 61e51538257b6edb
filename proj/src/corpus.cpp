#include "attnsteer/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "attnsteer/io.hpp"

namespace attnsteer {

Marker marker_from_name(std::string_view name) {
  for (int i = 0; i < kNumMarkers; ++i) {
    if (name == kMarkerNames[i] || name == kMarkerTokens[i]) return static_cast<Marker>(i);
  }
  fail(ErrorKind::InvalidArgument, "unknown marker '" + std::string(name) + "'");
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& tok = tokens_[i];
    require(!tok.empty() && tok.find_first_of(" \t\r\n") == std::string::npos,
            ErrorKind::InvalidArgument, "vocab token " + std::to_string(i) + " is empty or has whitespace");
    const bool inserted = index_.emplace(tok, static_cast<TokenId>(i)).second;
    require(inserted, ErrorKind::InvalidArgument, "duplicate vocab token '" + tok + "'");
  }
  auto lookup = [&](std::string_view w) {
    auto it = index_.find(std::string(w));
    require(it != index_.end(), ErrorKind::InvalidArgument,
            "vocab is missing required token '" + std::string(w) + "'");
    return it->second;
  };
  pad_id_ = lookup(kPadToken);
  bos_id_ = lookup(kBosToken);
  for (int m = 0; m < kNumMarkers; ++m) marker_ids_[m] = lookup(kMarkerTokens[m]);
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open vocab " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::string text;
  for (const auto& t : tokens_) {
    text += t;
    text += '\n';
  }
  write_file_atomic(path, text);
}

bool Vocab::contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

TokenId Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) fail(ErrorKind::UnknownToken, "'" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorKind::UnknownToken,
          "id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocab::is_special(TokenId id) const noexcept {
  if (id == pad_id_ || id == bos_id_) return true;
  return std::find(marker_ids_.begin(), marker_ids_.end(), id) != marker_ids_.end();
}

std::string Vocab::hash() const {
  std::string text;
  for (const auto& t : tokens_) {
    text += t;
    text += '\n';
  }
  return sha256_hex(text);
}

std::string normalize_text(std::string_view text) {
  std::string out;
  std::istringstream ss{std::string(text)};
  std::string word;
  while (ss >> word) {
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab, TokenizerOptions options) {
  std::vector<TokenId> ids;
  std::istringstream ss{std::string(text)};
  std::string word;
  while (ss >> word) {
    if (vocab.contains(word)) {
      ids.push_back(vocab.id(word));
      continue;
    }
    if (!options.char_fallback) fail(ErrorKind::UnknownToken, "'" + word + "' is out of vocabulary");
    for (std::size_t i = 0; i < word.size(); ++i) {
      std::string piece = i == 0 ? std::string(1, word[i]) : "##" + std::string(1, word[i]);
      if (!vocab.contains(piece)) {
        fail(ErrorKind::UnknownToken, "no character fallback for '" + piece + "' in '" + word + "'");
      }
      ids.push_back(vocab.id(piece));
    }
  }
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (tok.size() > 2 && tok.compare(0, 2, "##") == 0 && !out.empty()) {
      out.append(tok, 2, std::string::npos);
      continue;
    }
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

RenderedPrompt render_prompt(std::span<const TokenId> prefix, std::span<const TokenId> body,
                             const Vocab& vocab) {
  RenderedPrompt p;
  p.token_ids.reserve(1 + prefix.size() + body.size() + kNumMarkers);
  p.token_ids.push_back(vocab.bos_id());
  p.prefix_begin = 1;
  p.token_ids.insert(p.token_ids.end(), prefix.begin(), prefix.end());
  p.prefix_end = 1 + static_cast<int>(prefix.size());
  p.token_ids.insert(p.token_ids.end(), body.begin(), body.end());
  for (int m = 0; m < kNumMarkers; ++m) {
    p.candidate_positions[m] = static_cast<int>(p.token_ids.size());
    p.token_ids.push_back(vocab.marker_ids()[m]);
  }
  return p;
}

namespace {

std::vector<TokenId> body_tokens(std::string_view question_template, std::string_view statement,
                                 const Vocab& vocab) {
  auto body = tokenize(question_template, vocab);
  auto st = tokenize(statement, vocab);
  body.insert(body.end(), st.begin(), st.end());
  return body;
}

}  // namespace

ConceptDataset build_concept_dataset(const std::vector<std::string>& statements,
                                     std::string_view question_template, std::string_view prefix,
                                     const Vocab& vocab, std::uint64_t split_seed,
                                     std::string concept_id) {
  if (statements.size() < 2 || statements.size() % 2 != 0) {
    fail(ErrorKind::OddDatasetSize, "need an even number >= 2 of statements, got " +
                                        std::to_string(statements.size()));
  }
  const auto prefix_ids = tokenize(prefix, vocab);
  if (prefix_ids.empty()) fail(ErrorKind::EmptyPrefix, "prefix has no tokens");

  ConceptDataset ds;
  ds.concept_id = std::move(concept_id);
  ds.prefix = normalize_text(prefix);
  ds.question_template = normalize_text(question_template);
  ds.statements = statements;
  ds.split_seed = split_seed;

  std::vector<int> order(statements.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::mt19937_64 rng(split_seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[uniform_index(rng, i + 1)]);
  }

  const std::size_t half = statements.size() / 2;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int s = order[i];
    const auto body = body_tokens(question_template, statements[s], vocab);
    if (i < half) {
      auto p = render_prompt(prefix_ids, body, vocab);
      p.statement_index = s;
      ds.prefixed.push_back(std::move(p));
      auto twin = render_prompt({}, body, vocab);
      twin.statement_index = s;
      ds.counterparts.push_back(std::move(twin));
    } else {
      auto p = render_prompt({}, body, vocab);
      p.statement_index = s;
      ds.unprefixed.push_back(std::move(p));
    }
  }
  return ds;
}

namespace {

json prompt_meta(const RenderedPrompt& p, const char* set, std::size_t offset) {
  return json{{"set", set},
              {"statement_index", p.statement_index},
              {"offset", offset},
              {"length", p.length()},
              {"prefix_begin", p.prefix_begin},
              {"prefix_end", p.prefix_end},
              {"candidates", p.candidate_positions}};
}

}  // namespace

void save_dataset(const ConceptDataset& dataset, const Vocab& vocab, const std::filesystem::path& json_path,
                  const json& meta) {
  json doc{{"concept_id", dataset.concept_id},
           {"prefix", dataset.prefix},
           {"question_template", dataset.question_template},
           {"statements", dataset.statements},
           {"split_seed", dataset.split_seed}};
  if (!meta.is_null() && !meta.empty()) doc["meta"] = meta;
  write_file_atomic(json_path, doc.dump(2) + "\n");

  std::vector<TokenId> flat;
  json prompts = json::array();
  auto add = [&](const std::vector<RenderedPrompt>& set, const char* name) {
    for (const auto& p : set) {
      prompts.push_back(prompt_meta(p, name, flat.size()));
      flat.insert(flat.end(), p.token_ids.begin(), p.token_ids.end());
    }
  };
  add(dataset.prefixed, "prefixed");
  add(dataset.unprefixed, "unprefixed");
  add(dataset.counterparts, "counterpart");
  json header{{"dtype", "int32"},
              {"shape", {flat.size()}},
              {"vocab_hash", vocab.hash()},
              {"prompts", std::move(prompts)}};
  auto sidecar = json_path;
  sidecar.replace_extension(".tokens");
  write_blob(sidecar, header, pack_i32(flat));
}

ConceptDataset load_dataset(const std::filesystem::path& json_path, const Vocab& vocab) {
  json doc;
  try {
    doc = json::parse(read_text_file(json_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::IoError, "bad dataset json " + json_path.string() + ": " + e.what());
  }
  auto ds = build_concept_dataset(doc.at("statements").get<std::vector<std::string>>(),
                                  doc.at("question_template").get<std::string>(),
                                  doc.at("prefix").get<std::string>(), vocab,
                                  doc.at("split_seed").get<std::uint64_t>(),
                                  doc.at("concept_id").get<std::string>());
  auto sidecar = json_path;
  sidecar.replace_extension(".tokens");
  if (std::filesystem::exists(sidecar)) {
    const Blob blob = read_blob(sidecar);
    require(blob.header.at("vocab_hash").get<std::string>() == vocab.hash(), ErrorKind::ConfigMismatch,
            "token cache " + sidecar.string() + " was built with a different vocab");
    const auto flat = unpack_i32(blob.payload, 0, blob.payload.size() / sizeof(TokenId));
    std::size_t expected = 0;
    for (const auto* set : {&ds.prefixed, &ds.unprefixed, &ds.counterparts}) {
      for (const auto& p : *set) expected += p.token_ids.size();
    }
    require(flat.size() == expected, ErrorKind::ConfigMismatch, "token cache does not match dataset");
  }
  return ds;
}

std::vector<CorpusSequence> generate_synthetic_corpus(std::span<const PlantedConceptSpec> specs,
                                                      const Vocab& vocab, std::size_t n_sequences,
                                                      std::uint64_t rng_seed,
                                                      const CorpusOptions& options) {
  require(n_sequences >= 1, ErrorKind::InvalidArgument, "n_sequences must be >= 1");
  require(!options.questions.empty() && !options.statement_pool.empty() && !options.answer_pool.empty(),
          ErrorKind::InvalidArgument, "corpus options need questions, statement and answer pools");
  require(options.statement_question < options.questions.size(), ErrorKind::InvalidArgument,
          "statement_question out of range");
  require(options.dampener_rate >= 0.0 && options.dampener_rate <= 1.0 && options.dampening >= 0.0 &&
              options.dampening <= 1.0,
          ErrorKind::InvalidArgument, "dampener rate and factor must lie in [0,1]");
  require(options.min_statement_words >= 1 && options.max_statement_words >= options.min_statement_words,
          ErrorKind::InvalidArgument, "bad statement length range");

  if (options.require_disjoint_signals) {
    std::unordered_set<TokenId> seen;
    for (const auto& spec : specs) {
      for (TokenId t : spec.signal_tokens) {
        if (!seen.insert(t).second) {
          fail(ErrorKind::VocabTooSmall,
               "signal token '" + vocab.token(t) + "' is shared by several concepts");
        }
      }
    }
  }
  for (const auto& spec : specs) {
    require(!spec.signal_tokens.empty(), ErrorKind::InvalidArgument, spec.concept_id + " has no signal tokens");
    require(spec.strength >= 0.0 && spec.strength <= 1.0, ErrorKind::InvalidArgument,
            spec.concept_id + " strength outside [0,1]");
    for (TokenId t : spec.signal_tokens) {
      require(!vocab.is_special(t), ErrorKind::InvalidArgument, "signal token is a special token");
    }
  }

  std::mt19937_64 rng(rng_seed);
  std::vector<CorpusSequence> corpus;
  corpus.reserve(n_sequences);
  for (std::size_t n = 0; n < n_sequences; ++n) {
    CorpusSequence seq;
    const bool prefixed = !specs.empty() && uniform01(rng) >= options.unprefixed_fraction;
    if (prefixed) seq.concept_index = static_cast<int>(uniform_index(rng, specs.size()));

    seq.tokens.push_back(vocab.bos_id());
    if (prefixed) {
      const auto& phrase = specs[seq.concept_index].prefix_phrase;
      seq.tokens.insert(seq.tokens.end(), phrase.begin(), phrase.end());
    }
    const bool with_statement = uniform01(rng) < options.statement_fraction;
    const std::size_t q = with_statement ? options.statement_question
                                         : uniform_index(rng, options.questions.size());
    const auto& question = options.questions[q];
    seq.tokens.insert(seq.tokens.end(), question.begin(), question.end());
    double strength = prefixed ? specs[seq.concept_index].strength : 0.0;
    if (with_statement) {
      const int span = options.max_statement_words - options.min_statement_words + 1;
      const int words = options.min_statement_words + static_cast<int>(uniform_index(rng, span));
      for (int w = 0; w < words; ++w) {
        if (!options.dampener_pool.empty() && uniform01(rng) < options.dampener_rate) {
          seq.tokens.push_back(options.dampener_pool[uniform_index(rng, options.dampener_pool.size())]);
          strength *= options.dampening;
        } else {
          seq.tokens.push_back(options.statement_pool[uniform_index(rng, options.statement_pool.size())]);
        }
      }
    }
    for (TokenId m : vocab.marker_ids()) seq.tokens.push_back(m);
    seq.continuation_begin = static_cast<int>(seq.tokens.size());
    for (int c = 0; c < options.continuation_length; ++c) {
      if (prefixed && uniform01(rng) < strength) {
        const auto& sig = specs[seq.concept_index].signal_tokens;
        seq.tokens.push_back(sig[uniform_index(rng, sig.size())]);
      } else {
        seq.tokens.push_back(options.answer_pool[uniform_index(rng, options.answer_pool.size())]);
      }
    }
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace attnsteer
