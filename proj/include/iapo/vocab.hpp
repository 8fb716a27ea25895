#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace iapo {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Fixed token ids of the standard vocabulary.
namespace tok {
inline constexpr TokenId kPlus = 10;
inline constexpr TokenId kTimes = 11;
inline constexpr TokenId kEquals = 12;
inline constexpr TokenId kThinkEnd = 13;
inline constexpr TokenId kAnswer = 14;
inline constexpr TokenId kAnswerEnd = 15;
inline constexpr TokenId kEos = 16;
inline constexpr TokenId kPad = 17;
inline constexpr int kVocabSize = 18;
constexpr TokenId digit(int d) { return static_cast<TokenId>(d); }
constexpr bool is_digit(TokenId t) { return t >= 0 && t <= 9; }
}  // namespace tok

// The closed token alphabet: digits 0-9, '+', '×', '=', the four structural
// tokens and PAD. Ids are dense and fixed at build time.
class Vocab {
 public:
  static const Vocab& standard();

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  // Throws VocabularyError naming the token when it is unknown.
  TokenId id_of(std::string_view token) const;

  std::span<const TokenId> answer_alphabet() const { return answers_; }
  std::span<const TokenId> postfix() const { return postfix_; }
  bool is_structural(TokenId id) const;

  // Whitespace-separated token strings <-> ids.
  TokenSeq tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

 private:
  Vocab();

  std::vector<std::string> tokens_;
  std::array<TokenId, 10> answers_{};
  std::array<TokenId, 2> postfix_{};
};

// What the early-exit readout appends and which ids count as answers. The
// standard vocab uses [</think>, <answer>] and the ten digits; the reduced
// models in theory checks supply their own.
struct AnswerReadout {
  TokenSeq postfix;
  TokenSeq answers;

  static AnswerReadout standard();
};

}  // namespace iapo
