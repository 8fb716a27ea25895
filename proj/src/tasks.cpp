#include "iapo/tasks.hpp"

#include <algorithm>
#include <fstream>
#include "json.hpp"

#include "iapo/error.hpp"
#include "iapo/rng.hpp"

namespace iapo {

int eval_expression(const Expression& expr) {
  if (expr.operands.size() < 2 || expr.operators.size() + 1 != expr.operands.size()) {
    throw DomainError("expression needs n >= 2 operands and n-1 operators");
  }
  for (int v : expr.operands) {
    if (v < 0 || v > 9) throw DomainError("operand outside 0..9");
  }
  int acc = expr.operands[0];
  for (std::size_t i = 0; i < expr.operators.size(); ++i) {
    const int rhs = expr.operands[i + 1];
    acc = expr.operators[i] == Operator::kAdd ? acc + rhs : acc * rhs;
    acc %= Expression::kModulus;
  }
  return acc;
}

TokenSeq tokenize_expression(const Expression& expr) {
  TokenSeq out;
  out.reserve(2 * expr.operands.size());
  for (std::size_t i = 0; i < expr.operands.size(); ++i) {
    if (i) out.push_back(expr.operators[i - 1] == Operator::kAdd ? tok::kPlus : tok::kTimes);
    out.push_back(tok::digit(expr.operands[i]));
  }
  out.push_back(tok::kEquals);
  return out;
}

Task generate_task(std::uint64_t seed, int difficulty) {
  if (difficulty < 2) {
    throw DomainError("invalid difficulty " + std::to_string(difficulty) + ": need n >= 2");
  }
  RngStream rng(derive_seed(seed, {0x7A5C, static_cast<std::uint64_t>(difficulty)}));
  Expression expr;
  for (int i = 0; i < difficulty; ++i) {
    expr.operands.push_back(static_cast<int>(rng.below(10)));
    if (i) expr.operators.push_back(rng.below(2) == 0 ? Operator::kAdd : Operator::kMul);
  }
  return Task{tokenize_expression(expr), tok::digit(eval_expression(expr)), TaskSource::kSynthetic,
              difficulty};
}

Task synthetic_task(std::uint64_t seed, std::uint64_t index, int difficulty) {
  return generate_task(derive_seed(seed, {index}), difficulty);
}

std::vector<Task> synthetic_tasks(std::uint64_t seed, std::size_t count, int difficulty) {
  std::vector<Task> tasks;
  tasks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) tasks.push_back(synthetic_task(seed, i, difficulty));
  return tasks;
}

bool check_answer(const Task& task, std::span<const TokenId> completion) {
  auto it = std::find(completion.begin(), completion.end(), tok::kAnswer);
  if (it == completion.end() || std::next(it) == completion.end()) return false;
  return *std::next(it) == task.answer;
}

std::vector<Task> load_tasks_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open task file " + path.string());
  const auto& vocab = Vocab::standard();
  std::vector<Task> tasks;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("query") || !rec.contains("answer") ||
        !rec["query"].is_string() || !rec["answer"].is_string()) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                       ": expected string fields \"query\" and \"answer\"");
    }
    Task task;
    task.source = TaskSource::kIngested;
    task.query = vocab.tokenize(rec["query"].get<std::string>());
    task.answer = vocab.id_of(rec["answer"].get<std::string>());
    for (TokenId t : task.query) {
      if (vocab.is_structural(t)) {
        throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                         ": structural token in query");
      }
    }
    if (!tok::is_digit(task.answer)) {
      throw VocabularyError(path.string() + ": line " + std::to_string(line_no) +
                            ": answer \"" + vocab.token(task.answer) +
                            "\" is not in the answer alphabet");
    }
    task.difficulty = static_cast<int>(std::count_if(task.query.begin(), task.query.end(),
                                                     [](TokenId t) { return tok::is_digit(t); }));
    tasks.push_back(std::move(task));
  }
  return tasks;
}

void write_tasks_jsonl(const std::filesystem::path& path, std::span<const Task> tasks) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write task file " + path.string());
  const auto& vocab = Vocab::standard();
  for (const auto& task : tasks) {
    nlohmann::json rec{{"query", vocab.detokenize(task.query)}, {"answer", vocab.token(task.answer)}};
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace iapo
