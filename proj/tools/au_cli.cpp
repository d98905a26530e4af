// Command-line runner for the unlearning testbed.

#include <CLI11.hpp>

#include <iostream>

#include "au/pipeline.hpp"

namespace {

using namespace au;
using pipeline::RunManifest;

enum ExitCode { kOk = 0, kOther = 1, kValidation = 2, kCalibration = 3, kNumeric = 4 };

RunManifest load_manifest(const std::string& path) {
  RunManifest m = path.empty() ? RunManifest{} : manifest::load(path);
  manifest::validate(m);
  return m;
}

template <class F>
void with_precision(const RunManifest& m, F&& f) {
  if (m.model.precision == model::Precision::Single)
    f(float{});
  else
    f(double{});
}

void print_report(const pipeline::ReportResult& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << pipeline::read_text(r.csv);
  std::cout << "wrote " << r.csv << " and " << r.json << '\n';
}

void print_eval(const eval::MethodReport& r) {
  std::cout << r.method << ": HR " << eval::fmt(r.seen.hr()) << "% (unseen " << eval::fmt(r.unseen.hr())
            << "%), KL code/instr/pkg " << eval::fmt(r.drift.code.mean_kl) << " / "
            << eval::fmt(r.drift.instruct.mean_kl) << " / " << eval::fmt(r.drift.package.mean_kl)
            << ", utility ppl " << eval::fmt(r.utility.perplexity) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive unlearning of package hallucinations on a synthetic testbed"};
  app.require_subcommand(1);
  std::string manifest_path;
  app.add_option("-m,--manifest", manifest_path, "Run manifest (JSON); defaults apply when omitted")
      ->check(CLI::ExistingFile);

  auto* show = app.add_subcommand("show-manifest", "Print the effective manifest with every default filled in");
  auto* gen = app.add_subcommand("gen-world", "Generate world, corpora, registry and prompt pools");
  auto* base = app.add_subcommand("train-base", "Pretrain the base model and check its hallucination rate");
  auto* run = app.add_subcommand("run", "Run one unlearning method from the base checkpoint");
  std::string method_name;
  std::string run_name;
  run->add_option("--method", method_name, "au, au_ce_only, au_npo_only, ga, npo or pmc")->required();
  run->add_option("--name", run_name, "Run name (defaults to the method name)");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on all three axes");
  std::string checkpoint;
  std::string eval_name;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint path, or 'base'")->required();
  ev->add_option("--name", eval_name, "Report row name (defaults to the run directory name)");
  auto* sw = app.add_subcommand("sweep", "Run and evaluate one method over a list of values of a loop setting");
  std::string param, values, sweep_method = "au";
  sw->add_option("--param", param, "Loop setting, e.g. n_inner or max_mutations")->required();
  sw->add_option("--values", values, "Comma-separated values")->required();
  sw->add_option("--method", sweep_method, "Method to sweep");
  auto* rep = app.add_subcommand("report", "Assemble the summary table from all evaluations");
  auto* all = app.add_subcommand("all", "gen-world, train-base, every method, evaluation and report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    const RunManifest m = load_manifest(manifest_path);
    if (*show) {
      std::cout << manifest::to_json(m).dump(2) << '\n';
    } else if (*gen) {
      const auto r = pipeline::gen_world(m);
      std::cout << "world hash " << r.world_hash << '\n' << r.files.dump(2) << '\n';
    } else if (*base) {
      with_precision(m, [&](auto tag) {
        using Real = decltype(tag);
        const auto r = pipeline::train_base<Real>(m, [](const pretrain::EvalPoint& p) {
          std::cerr << "step " << p.step << " train " << eval::fmt(p.train_loss) << " heldout "
                    << eval::fmt(p.heldout_nll) << '\n';
        });
        std::cout << "base checkpoint " << r.checkpoint << " (" << r.parameter_hash << ")\n"
                  << "steps " << r.steps << ", best " << r.best_step << ", heldout NLL " << eval::fmt(r.heldout_nll)
                  << ", base HR " << eval::fmt(r.base_hr) << "%\n";
      });
    } else if (*run) {
      loop::Method method;
      try {
        method = loop::method_from_name(method_name);
      } catch (const ArgumentError& e) {
        throw ValidationError(e.what());
      }
      with_precision(m, [&](auto tag) {
        const auto r = pipeline::run<decltype(tag)>(m, method, run_name);
        std::cout << "run " << r.name << ": " << r.steps << " steps, checkpoint " << r.checkpoint << ", metrics "
                  << r.metrics << '\n';
      });
    } else if (*ev) {
      std::string path = checkpoint, name = eval_name;
      if (checkpoint == "base") {
        path = pipeline::paths(m).base_checkpoint().string();
        if (name.empty()) name = "base";
      }
      if (name.empty()) name = std::filesystem::path(path).parent_path().filename().string();
      with_precision(m, [&](auto tag) { print_eval(pipeline::evaluate<decltype(tag)>(m, path, name)); });
    } else if (*sw) {
      loop::Method method;
      try {
        method = loop::method_from_name(sweep_method);
      } catch (const ArgumentError& e) {
        throw ValidationError(e.what());
      }
      with_precision(m, [&](auto tag) {
        print_report(pipeline::sweep<decltype(tag)>(m, method, param, values,
                                                    [](const std::string& n) { std::cerr << "sweep point " << n << '\n'; }));
      });
    } else if (*rep) {
      print_report(pipeline::report(m));
    } else if (*all) {
      with_precision(m, [&](auto tag) { print_report(pipeline::run_all<decltype(tag)>(m, print_eval)); });
    }
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kValidation;
  } catch (const ConfigError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kValidation;
  } catch (const CalibrationError& e) {
    std::cerr << "calibration error: " << e.what() << '\n';
    return kCalibration;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure at step " << e.step() << ": " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
