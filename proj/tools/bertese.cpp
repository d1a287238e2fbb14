// SPDX-License-Identifier: Apache-2.0
#include "bertese/cli.hpp"

int main(int argc, char** argv) { return bertese::cli::run(argc, argv); }
