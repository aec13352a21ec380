// SPDX-License-Identifier: Apache-2.0
// Trains logistic regression on gaussian blobs in every mode through the
// launcher, the same path the `compare` subcommand takes.

#include <cstdio>
#include <filesystem>

#include "hybridps/launcher/launcher.hpp"

int main() {
  hps::launcher::RunConfig c;
  c.workers = 4;
  c.clients = 2;
  c.epochs = 3;
  c.batch_size = 32;
  c.dataset.train_size = 4000;
  c.dataset.test_size = 1000;
  c.out = (std::filesystem::temp_directory_path() / "hybridps_demo").string();
  auto report = hps::launcher::compare_modes(c);
  for (const auto& row : report.summary)
    std::printf("%-10s acc %.4f  %7.3f s  %9llu bytes to servers\n", row.mode.c_str(),
                row.final_val_acc, row.total_time_s,
                static_cast<unsigned long long>(row.server_in_bytes));
}
