// SPDX-License-Identifier: Apache-2.0
#include "fmtlab/cli.hpp"

int main(int argc, char** argv) { return fmtlab::run_cli(argc, argv); }
