#include <malloc.h>

#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "thzsim/harness.hpp"
#include "thzsim/kernels.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", a.seed, "Overrides every seed in the config");
  sub->add_option("--out", a.out, "Output directory (beats THZ_OUT_DIR and the config)");
}

thz::ExperimentConfig resolve(const CommonArgs& a) {
  thz::ExperimentConfig c = thz::load_experiment_config(a.config);
  thz::apply_env_overrides(c);
  if (a.seed) thz::apply_seed(c, *a.seed);
  if (!a.out.empty()) c.output_dir = a.out;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);

  CLI::App app{"THz vehicular sensing/communication association simulator"};
  app.require_subcommand(1);
  std::string isa;
  app.add_option("--isa", isa, "Kernel variant: scalar or avx2 (default: best available)");

  CommonArgs args;
  auto* gen = app.add_subcommand("generate", "Generate train/val/test topologies");
  auto* lab = app.add_subcommand("label", "Label every topology with its exhaustive optimum");
  auto* trn = app.add_subcommand("train", "Train the dynamic GNN and the fixed baseline");
  auto* evl = app.add_subcommand("evaluate", "Compare all methods on the test split");
  auto* swp = app.add_subcommand("sweep", "Sweep one requirement or the hop count");
  auto* exp = app.add_subcommand("explain", "Dump the per-link reasoning behind one assignment");
  for (auto* s : {gen, lab, trn, evl, swp, exp}) add_common(s, args);

  bool retrain_head = false;
  std::string base_model;
  trn->add_flag("--retrain-head", retrain_head, "Retrain only the head of a saved model");
  trn->add_option("--base-model", base_model, "Checkpoint reused by --retrain-head");
  int topology = 0;
  bool dump_links = false;
  exp->add_option("--topology", topology, "Index into the test split");
  exp->add_flag("--dump-links", dump_links, "Include every candidate link and its counterfactual objective");

  CLI11_PARSE(app, argc, argv);

  try {
    if (isa == "scalar") thz::kernels::set_isa(thz::kernels::Isa::Scalar);
    else if (isa == "avx2") thz::kernels::set_isa(thz::kernels::Isa::Avx2);
    else if (!isa.empty()) throw thz::Error("--isa must be scalar or avx2");

    thz::ExperimentConfig c = resolve(args);
    if (gen->parsed()) return thz::cmd_generate(c);
    if (lab->parsed()) return thz::cmd_label(c);
    if (trn->parsed()) {
      if (retrain_head) c.retrain_head = true;
      if (!base_model.empty()) c.base_model = base_model;
      c.validate();
      return thz::cmd_train(c);
    }
    if (evl->parsed()) return thz::cmd_evaluate(c);
    if (swp->parsed()) return thz::cmd_sweep(c);
    if (exp->parsed()) return thz::cmd_explain(c, topology, dump_links);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
