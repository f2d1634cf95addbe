// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "m2r2/cli.hpp"

int main(int argc, char** argv) { return m2r2::cli::run(argc, argv, std::cout, std::cerr); }
