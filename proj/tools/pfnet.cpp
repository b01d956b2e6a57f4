// pfnet — power flow solvers, dataset generation, GNN training and studies.

#include <cstdlib>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pfnet/checkpoint.hpp"
#include "pfnet/dataset.hpp"
#include "pfnet/error.hpp"
#include "pfnet/graph.hpp"
#include "pfnet/grid.hpp"
#include "pfnet/matpower.hpp"
#include "pfnet/model.hpp"
#include "pfnet/solver.hpp"
#include "pfnet/studies.hpp"
#include "pfnet/train.hpp"

using nlohmann::json;

namespace {

int default_workers() {
  if (const char* env = std::getenv("PFNET_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 16u));
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t next = text.find(',', pos);
    if (next == std::string::npos) next = text.size();
    seeds.push_back(std::stoull(text.substr(pos, next - pos)));
    pos = next + 1;
  }
  if (seeds.empty()) throw pfnet::ValidationError("empty seed list");
  return seeds;
}

std::vector<std::string> parse_name_list(const std::string& text) {
  std::vector<std::string> names;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t next = text.find(',', pos);
    if (next == std::string::npos) next = text.size();
    names.push_back(text.substr(pos, next - pos));
    pos = next + 1;
  }
  if (names.empty()) throw pfnet::ValidationError("empty name list");
  return names;
}

json report_to_json(const pfnet::EvalReport& rep) {
  return json{{"masked_l2", rep.masked_l2},
              {"mse", rep.mse},
              {"physical", rep.physical},
              {"denorm_err_mean", {{"vm_pu", rep.denorm_err_mean[0]},
                                   {"va_deg", rep.denorm_err_mean[1]},
                                   {"p_mw", rep.denorm_err_mean[2]},
                                   {"q_mvar", rep.denorm_err_mean[3]}}},
              {"denorm_err_std", {{"vm_pu", rep.denorm_err_std[0]},
                                  {"va_deg", rep.denorm_err_std[1]},
                                  {"p_mw", rep.denorm_err_std[2]},
                                  {"q_mvar", rep.denorm_err_std[3]}}},
              {"wall_ms_per_sample", rep.wall_ms_per_sample},
              {"n_samples", rep.n_samples}};
}

pfnet::ModelConfig config_for(const std::string& preset, const std::string& arch, int fixed_nodes) {
  pfnet::ModelConfig cfg = pfnet::model_preset(preset);
  cfg.arch = arch;
  if (arch == "mlp") cfg.fixed_nodes = fixed_nodes;
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"power flow approximation toolkit"};
  app.require_subcommand(1);

  // ---- solve ----
  auto* solve = app.add_subcommand("solve", "run a power flow solver on a case file");
  std::string solve_case, solve_method = "nr";
  double solve_tol = 1e-8;
  solve->add_option("--case", solve_case, "MATPOWER-style case file")->required();
  solve->add_option("--method", solve_method, "nr or dc")->check(CLI::IsMember({"nr", "dc"}));
  solve->add_option("--tol", solve_tol, "max mismatch tolerance (nr)");
  solve->callback([&] {
    pfnet::GridCase c = pfnet::load_case(solve_case);
    pfnet::PFSolution sol;
    if (solve_method == "nr") {
      pfnet::SolverConfig scfg;
      scfg.tol = solve_tol;
      sol = pfnet::newton_raphson(c, scfg);
    } else {
      sol = pfnet::dc_power_flow(c);
    }
    json buses = json::array();
    for (std::size_t i = 0; i < sol.vm.size(); ++i)
      buses.push_back({{"bus", c.buses[i].id},
                       {"vm", sol.vm[i]},
                       {"va", sol.va[i]},
                       {"p", sol.p[i]},
                       {"q", sol.q[i]}});
    json out{{"case", solve_case},
             {"method", solve_method},
             {"iterations", sol.iterations},
             {"max_mismatch", sol.max_mismatch},
             {"converged", sol.converged},
             {"buses", buses}};
    std::cout << out.dump(2) << "\n";
  });

  // ---- generate ----
  auto* gen = app.add_subcommand("generate", "sample a perturbed solved dataset from a base case");
  std::string gen_case, gen_out, gen_splits = "0.5,0.2,0.3";
  std::size_t gen_count = 1000;
  std::uint64_t gen_seed = 0;
  gen->add_option("--case", gen_case, "base case file")->required();
  gen->add_option("--count", gen_count, "number of samples")->required();
  gen->add_option("--seed", gen_seed, "perturbation seed");
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--splits", gen_splits, "train,val,test fractions");
  gen->callback([&] {
    pfnet::GridCase base = pfnet::load_case(gen_case);
    pfnet::PerturbSpec spec;
    spec.seed = gen_seed;
    auto parts = parse_name_list(gen_splits);
    if (parts.size() != 3) throw pfnet::ValidationError("--splits needs three fractions");
    std::array<double, 3> fr{std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
    pfnet::Dataset ds = pfnet::generate_dataset(base, spec, gen_count, fr, default_workers());
    pfnet::save_dataset(gen_out, ds);
    json out{{"out", gen_out},
             {"n_samples", ds.graphs.size()},
             {"train", ds.train.count},
             {"val", ds.val.count},
             {"test", ds.test.count},
             {"n_nodes", ds.graphs.front().n}};
    std::cout << out.dump(2) << "\n";
  });

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a model on one or more datasets");
  std::string tr_data, tr_model = "small", tr_arch = "pfnet", tr_loss = "mse";
  std::string tr_ckpt = "model.pfck", tr_metrics;
  pfnet::TrainConfig tr_cfg;
  tr->add_option("--data", tr_data, "dataset path(s), comma separated")->required();
  tr->add_option("--model", tr_model, "small, medium or large")
      ->check(CLI::IsMember({"small", "medium", "large"}));
  tr->add_option("--arch", tr_arch, "pfnet, gcn or mlp baseline")
      ->check(CLI::IsMember({"pfnet", "gcn", "mlp"}));
  tr->add_option("--loss", tr_loss, "mse, physical or mixed")
      ->check(CLI::IsMember({"mse", "physical", "mixed"}));
  tr->add_option("--w", tr_cfg.w, "mixed-loss data weight");
  tr->add_option("--tau", tr_cfg.tau, "mixed-loss physics scale");
  tr->add_option("--seed", tr_cfg.seed, "training seed");
  tr->add_option("--epochs", tr_cfg.epochs, "training epochs");
  tr->add_option("--batch", tr_cfg.batch_size, "batch size");
  tr->add_option("--lr", tr_cfg.lr, "learning rate");
  tr->add_option("--patience", tr_cfg.early_stop_patience, "early-stop patience (epochs)");
  tr->add_option("--ckpt", tr_ckpt, "checkpoint output path");
  tr->add_option("--metrics", tr_metrics, "metrics CSV output path");
  tr->callback([&] {
    tr_cfg.loss = pfnet::parse_loss(tr_loss);
    std::vector<pfnet::Dataset> datasets;
    for (const std::string& path : parse_name_list(tr_data))
      datasets.push_back(pfnet::load_dataset(path));
    std::vector<const pfnet::Dataset*> refs;
    for (const auto& d : datasets) refs.push_back(&d);
    pfnet::ModelConfig cfg = config_for(tr_model, tr_arch, datasets.front().graphs.front().n);
    pfnet::TrainResult res = pfnet::train(refs, cfg, tr_cfg);
    pfnet::save_checkpoint(tr_ckpt, res.checkpoint);
    if (!tr_metrics.empty()) pfnet::write_metrics_csv(tr_metrics, res.history);
    json out{{"ckpt", tr_ckpt},
             {"best_val_masked_l2", res.best_val},
             {"best_epoch", res.best_epoch},
             {"epochs_run", res.history.size()},
             {"param_count", res.checkpoint.params.param_count()}};
    std::cout << out.dump(2) << "\n";
  });

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_report;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset path")->required();
  ev->add_option("--split", ev_split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--report", ev_report, "also write the report JSON here");
  ev->callback([&] {
    pfnet::Checkpoint ck = pfnet::load_checkpoint(ev_ckpt);
    pfnet::Dataset ds = pfnet::load_dataset(ev_data);
    pfnet::EvalReport rep = pfnet::evaluate(ck, ds, pfnet::dataset_split(ds, ev_split));
    json out = report_to_json(rep);
    out["split"] = ev_split;
    std::cout << out.dump(2) << "\n";
    if (!ev_report.empty()) {
      std::ofstream os(ev_report);
      if (!os) throw pfnet::IoError("cannot open for writing: " + ev_report);
      os << out.dump(2) << "\n";
    }
  });

  // ---- bench ----
  auto* be = app.add_subcommand("bench", "time NR, DCPF and a model forward on a case");
  std::string be_case, be_ckpt, be_out;
  int be_repeats = 100;
  be->add_option("--case", be_case, "case file")->required();
  be->add_option("--ckpt", be_ckpt, "checkpoint path")->required();
  be->add_option("--repeats", be_repeats, "timing repeats (median of)");
  be->add_option("--out", be_out, "timing CSV path");
  be->callback([&] {
    pfnet::GridCase c = pfnet::load_case(be_case);
    pfnet::Checkpoint ck = pfnet::load_checkpoint(be_ckpt);
    auto rows = pfnet::bench(c, ck.params, be_repeats);
    json jrows = json::array();
    for (const auto& r : rows)
      jrows.push_back({{"method", r.method},
                       {"median_ms", r.median_ms},
                       {"iqr_ms", r.iqr_ms},
                       {"repeats", r.repeats}});
    std::cout << json{{"case", be_case}, {"rows", jrows}}.dump(2) << "\n";
    if (!be_out.empty()) pfnet::write_bench_csv(be_out, rows);
  });

  // ---- hop-study ----
  auto* hs = app.add_subcommand("hop-study", "k-hop receptive field sensitivity");
  std::string hs_ckpt, hs_data, hs_split = "test", hs_out;
  std::size_t hs_max = 0;
  hs->add_option("--ckpt", hs_ckpt, "checkpoint path")->required();
  hs->add_option("--data", hs_data, "dataset path")->required();
  hs->add_option("--split", hs_split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  hs->add_option("--max-samples", hs_max, "cap samples per configuration (0 = all)");
  hs->add_option("--out", hs_out, "result CSV path");
  hs->callback([&] {
    pfnet::Checkpoint ck = pfnet::load_checkpoint(hs_ckpt);
    pfnet::Dataset ds = pfnet::load_dataset(hs_data);
    pfnet::HopStudyResult res =
        pfnet::hop_study(ck, ds, pfnet::dataset_split(ds, hs_split), hs_max);
    json per_k = json::array();
    for (std::size_t ki = 0; ki < res.ks.size(); ++ki) {
      double avg = 0.0;
      int cov = 0;
      for (double v : res.central_loss[ki]) avg += v;
      for (int v : res.coverage[ki]) cov = std::max(cov, v);
      per_k.push_back({{"k", res.ks[ki]},
                       {"avg_central_masked_l2", avg / res.central_loss[ki].size()},
                       {"max_coverage", cov}});
    }
    std::cout << json{{"diameter", res.diameter},
                      {"full_graph_masked_l2", res.full_loss_avg},
                      {"per_k", per_k}}
                     .dump(2)
              << "\n";
    if (!hs_out.empty()) pfnet::write_hop_csv(hs_out, res);
  });

  // ---- ablation ----
  auto* ab = app.add_subcommand("ablation", "train and score architecture ablations");
  std::string ab_data, ab_variants = "full,one_layer,no_mp,one_layer_no_mp";
  std::string ab_seeds = "0,1,2", ab_model = "small", ab_out;
  int ab_epochs = 300;
  ab->add_option("--data", ab_data, "dataset path")->required();
  ab->add_option("--variants", ab_variants, "comma list of variants");
  ab->add_option("--seeds", ab_seeds, "comma list of seeds");
  ab->add_option("--model", ab_model, "base preset");
  ab->add_option("--epochs", ab_epochs, "training epochs per run");
  ab->add_option("--out", ab_out, "result CSV path");
  ab->callback([&] {
    pfnet::Dataset ds = pfnet::load_dataset(ab_data);
    pfnet::TrainConfig tc;
    tc.epochs = ab_epochs;
    auto rows = pfnet::ablation(ds, parse_name_list(ab_variants), parse_seed_list(ab_seeds),
                                pfnet::model_preset(ab_model), tc);
    json jrows = json::array();
    for (const auto& r : rows)
      jrows.push_back({{"variant", r.variant}, {"seed", r.seed}, {"test_masked_l2", r.test_masked_l2}});
    std::cout << json{{"rows", jrows}}.dump(2) << "\n";
    if (!ab_out.empty()) pfnet::write_ablation_csv(ab_out, rows);
  });

  // ---- scale-study ----
  auto* sc = app.add_subcommand("scale-study", "model size x loss grid");
  std::string sc_data, sc_sizes = "small,medium,large", sc_losses = "mse,physical,mixed";
  std::string sc_seeds = "0,1,2", sc_out;
  int sc_epochs = 300;
  sc->add_option("--data", sc_data, "dataset path")->required();
  sc->add_option("--sizes", sc_sizes, "comma list of presets");
  sc->add_option("--losses", sc_losses, "comma list of losses");
  sc->add_option("--seeds", sc_seeds, "comma list of seeds");
  sc->add_option("--epochs", sc_epochs, "training epochs per run");
  sc->add_option("--out", sc_out, "result CSV path");
  sc->callback([&] {
    pfnet::Dataset ds = pfnet::load_dataset(sc_data);
    std::vector<pfnet::LossKind> losses;
    for (const std::string& name : parse_name_list(sc_losses))
      losses.push_back(pfnet::parse_loss(name));
    pfnet::TrainConfig tc;
    tc.epochs = sc_epochs;
    auto rows = pfnet::scale_study(ds, parse_name_list(sc_sizes), losses,
                                   parse_seed_list(sc_seeds), tc);
    json jrows = json::array();
    for (const auto& r : rows)
      jrows.push_back({{"size", r.size},
                       {"loss", r.loss},
                       {"seed", r.seed},
                       {"test_masked_l2", r.test_masked_l2},
                       {"param_count", r.param_count}});
    std::cout << json{{"rows", jrows}}.dump(2) << "\n";
    if (!sc_out.empty()) pfnet::write_scale_csv(sc_out, rows);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);  // --help and friends: text to stdout, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const pfnet::ParseError& e) {
    std::cerr << json{{"error", "parse"}, {"message", e.what()}, {"line", e.line()}}.dump() << "\n";
    return 2;
  } catch (const pfnet::ValidationError& e) {
    std::cerr << json{{"error", "validation"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const pfnet::SolverError& e) {
    std::cerr << json{{"error", "solver"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const pfnet::TrainingError& e) {
    std::cerr << json{{"error", "training"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const pfnet::IoError& e) {
    std::cerr << json{{"error", "io"}, {"message", e.what()}}.dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 5;
  }
}
