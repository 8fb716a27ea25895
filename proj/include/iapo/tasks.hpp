#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "iapo/vocab.hpp"

namespace iapo {

enum class Operator : std::uint8_t { kAdd, kMul };

// Left-to-right modular chain expression over single digits.
struct Expression {
  std::vector<int> operands;
  std::vector<Operator> operators;
  static constexpr int kModulus = 10;
};

enum class TaskSource : std::uint8_t { kSynthetic, kIngested };

struct Task {
  TokenSeq query;  // expression tokens followed by '='
  TokenId answer = 0;
  TaskSource source = TaskSource::kSynthetic;
  int difficulty = 0;  // operand count
};

// Strict left-to-right fold, each intermediate reduced mod 10.
int eval_expression(const Expression& expr);

TokenSeq tokenize_expression(const Expression& expr);

// Deterministic in (seed, difficulty). Throws DomainError for difficulty < 2.
Task generate_task(std::uint64_t seed, int difficulty);

// Task `index` of the synthetic stream rooted at `seed`.
Task synthetic_task(std::uint64_t seed, std::uint64_t index, int difficulty);
std::vector<Task> synthetic_tasks(std::uint64_t seed, std::size_t count, int difficulty);

// True iff the token right after the first <answer> equals the task answer.
bool check_answer(const Task& task, std::span<const TokenId> completion);

std::vector<Task> load_tasks_jsonl(const std::filesystem::path& path);
void write_tasks_jsonl(const std::filesystem::path& path, std::span<const Task> tasks);

}  // namespace iapo
