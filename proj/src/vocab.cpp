#include "iapo/vocab.hpp"

#include <sstream>

#include "iapo/error.hpp"

namespace iapo {

Vocab::Vocab()
    : tokens_{"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "×", "=",
              "</think>", "<answer>", "</answer>", "<eos>", "<pad>"} {
  for (int d = 0; d < 10; ++d) answers_[d] = tok::digit(d);
  postfix_ = {tok::kThinkEnd, tok::kAnswer};
}

const Vocab& Vocab::standard() {
  static const Vocab vocab;
  return vocab;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  // ASCII spelling of the multiplication sign.
  if (token == "*") return tok::kTimes;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return static_cast<TokenId>(i);
  }
  return std::nullopt;
}

TokenId Vocab::id_of(std::string_view token) const {
  if (auto id = find(token)) return *id;
  throw VocabularyError("unknown token \"" + std::string(token) + "\"");
}

bool Vocab::is_structural(TokenId id) const {
  return id == tok::kThinkEnd || id == tok::kAnswer || id == tok::kAnswerEnd ||
         id == tok::kEos || id == tok::kPad;
}

TokenSeq Vocab::tokenize(std::string_view text) const {
  TokenSeq ids;
  std::istringstream in{std::string(text)};
  std::string piece;
  while (in >> piece) ids.push_back(id_of(piece));
  return ids;
}

std::string Vocab::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

AnswerReadout AnswerReadout::standard() {
  const auto& v = Vocab::standard();
  return AnswerReadout{TokenSeq(v.postfix().begin(), v.postfix().end()),
                       TokenSeq(v.answer_alphabet().begin(), v.answer_alphabet().end())};
}

}  // namespace iapo
