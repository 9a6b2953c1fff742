// Command-line front end: gen-data, train, solve, bench, export-vtk.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ddon/cli_io.hpp"

namespace {

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const std::string& code, const std::string& detail) {
  std::cerr << "error: " << code << ": " << one_line(detail) << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-decomposed neural operator toolkit"};
  app.require_subcommand(1, 1);
  std::string config_path, out;
  std::uint64_t seed = 0;
  int threads = 1;
  app.add_option("--config", config_path, "Run configuration (JSON)")->required();
  auto* seed_opt = app.add_option("--seed", seed, "Override the global seed");
  app.add_option("--out", out, "Output directory (overrides output.dir)");
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* gen = app.add_subcommand("gen-data", "Generate subdomain datasets");
  auto* train = app.add_subcommand("train", "Train one network per dataset");
  auto* solve = app.add_subcommand("solve", "Run the coupling scheme and write a metrics report");
  auto* bench = app.add_subcommand("bench", "Compare DDM and non-DDM variants");
  auto* vtk = app.add_subcommand("export-vtk", "Write saved solve fields as legacy VTK");
  for (auto* s : {gen, train, solve, bench, vtk}) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("UsageError", e.what()) + 1;
  }

  try {
    ddon::CliContext ctx;
    ctx.config = ddon::load_config(config_path);
    if (*seed_opt) ctx.config.seed = seed;
    ctx.out = out;
    ctx.threads = threads;
    if (*gen) ddon::cli_gen_data(ctx);
    if (*train) ddon::cli_train(ctx);
    if (*solve) ddon::cli_solve(ctx);
    if (*bench) ddon::cli_bench(ctx);
    if (*vtk) ddon::cli_export_vtk(ctx);
  } catch (const ddon::Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail("InternalError", e.what());
  }
  return 0;
}
