#pragma once

// Command-line front end. Every test command writes a self-describing JSON
// report: method, statistic, p-values, config echo and input hashes.

#include <iosfwd>
#include <string>
#include <vector>

namespace palimpsest::cli {

// Prices are per million tokens; n_sequences is in millions.
struct CostModel {
  double input_rate = 0.40;
  double output_rate = 1.60;
  double n_sequences = 8.0;
  std::size_t seq_len = 8;
};

// Scoring every prefix of an L-token sequence: input * n * (1 + ... + L-1)
// plus output * n * (L - 1).
double estimate_query_cost(const CostModel& c);

// Parses `args` (without the program name) and runs one subcommand. Returns
// the process exit code: 0 on a completed run, nonzero on any error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace palimpsest::cli
