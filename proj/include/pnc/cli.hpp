#pragma once

#include "pnc/common.hpp"

#include <string>
#include <vector>

namespace pnc {

// Exit codes: 0 success, 1 validation error, 2 numerical failure.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

// Winner selection for the sweep: index of the minimum finite validation NLL;
// -1 when every cell failed.
Index select_min_nll(const std::vector<double>& validation_nlls);

// Doubles rendered with '.' decimal and round-trip precision (CSV cells).
std::string csv_double(double value);

}  // namespace pnc
