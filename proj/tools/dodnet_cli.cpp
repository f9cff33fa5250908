#include <CLI11.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include "dodnet/bench.hpp"
#include "dodnet/checkpoint.hpp"
#include "dodnet/data.hpp"
#include "dodnet/train.hpp"

namespace {

using namespace dodnet;

Extent3 parse_triple(const std::string& text, const char* what) {
  Extent3 out{};
  std::size_t pos = 0;
  for (std::size_t a = 0; a < 3; ++a) {
    const auto comma = text.find(',', pos);
    const std::string part = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      out[a] = std::stoll(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw CLI::ValidationError(what, "expected D,H,W but got '" + text + "'");
    }
    if (a < 2 && comma == std::string::npos) throw CLI::ValidationError(what, "expected D,H,W but got '" + text + "'");
    if (a == 2 && comma != std::string::npos) throw CLI::ValidationError(what, "expected D,H,W but got '" + text + "'");
    pos = comma + 1;
  }
  return out;
}

ModelConfig preset(const std::string& name, int num_tasks) {
  if (name == "small" || name == "desk") return ModelConfig::desk(num_tasks);
  if (name == "paper") return ModelConfig::paper(num_tasks);
  throw CLI::ValidationError("--config", "unknown preset '" + name + "' (small, paper)");
}

std::filesystem::path resolve_checkpoint(const std::string& path) {
  if (std::filesystem::is_regular_file(path)) return path;
  if (std::filesystem::is_regular_file(path + ".ckpt")) return path + ".ckpt";
  throw std::runtime_error("no checkpoint at " + path + " or " + path + ".ckpt");
}

int num_tasks_in(std::span<const LabeledSample> samples) {
  int m = 0;
  for (const auto& s : samples) m = std::max(m, s.task.id);
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic on-demand segmentation network: data, training and benchmarks"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic partially labeled phantoms");
  int gen_tasks = 2, gen_per_task = 20;
  double gen_test_fraction = 0.2;
  std::string gen_shape = "16,32,32", gen_out;
  std::uint64_t gen_seed = 0;
  double gen_noise = 0.05;
  gen->add_option("--tasks", gen_tasks, "Number of tasks (1-8)")->check(CLI::Range(1, 8));
  gen->add_option("--per-task", gen_per_task, "Samples per task")->check(CLI::PositiveNumber);
  gen->add_option("--test-fraction", gen_test_fraction, "Share of each task's samples held out")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--shape", gen_shape, "Volume extents D,H,W");
  gen->add_option("--seed", gen_seed, "Master seed");
  gen->add_option("--noise", gen_noise, "Gaussian noise sigma");
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a network on a generated dataset");
  std::string tr_data, tr_config = "small", tr_out, tr_arch = "dodnet", tr_patch;
  TrainConfig tc;
  tc.steps_per_epoch = 50;
  tc.max_epochs = 20;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--config", tr_config, "Model preset: small or paper");
  tr->add_option("--arch", tr_arch, "dodnet, multi_head or cond_input");
  tr->add_option("--epochs", tc.max_epochs, "Epochs K")->check(CLI::PositiveNumber);
  tr->add_option("--steps-per-epoch", tc.steps_per_epoch, "Steps per epoch")->check(CLI::PositiveNumber);
  tr->add_option("--lr", tc.lr_init, "Initial learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--momentum", tc.momentum, "SGD momentum");
  tr->add_option("--batch", tc.batch_size, "Batch size")->check(CLI::PositiveNumber);
  tr->add_option("--patch", tr_patch, "Patch extents D,H,W");
  tr->add_option("--seed", tc.seed, "Seed for initialization and sampling");
  tr->add_option("--eval-every", tc.eval_every, "Validate every N steps (0: at the end)");
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_window;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--window", ev_window, "Sliding window D,H,W (default: whole volume)");

  // predict
  auto* pr = app.add_subcommand("predict", "Segment one volume for one task");
  std::string pr_ckpt, pr_in, pr_out, pr_window;
  int pr_task = 1;
  pr->add_option("--ckpt", pr_ckpt, "Checkpoint path")->required();
  pr->add_option("--task", pr_task, "1-based task index")->required();
  pr->add_option("--in", pr_in, "Input volume base path")->required();
  pr->add_option("--out", pr_out, "Output label volume base path")->required();
  pr->add_option("--window", pr_window, "Sliding window D,H,W (default: whole volume)");

  // bench
  auto* be = app.add_subcommand("bench", "Parameter, FLOP and timing comparison of the three architectures");
  std::string be_config = "small", be_shape, be_csv;
  std::vector<int> be_tasks{1, 2, 4, 7};
  int be_reps = 5;
  bool be_parallel = false;
  be->add_option("--config", be_config, "Model preset: small or paper");
  be->add_option("--tasks", be_tasks, "Task counts to time")->delimiter(',');
  be->add_option("--shape", be_shape, "Input extents D,H,W (default 64,128,128 for paper, 16,32,32 for small)");
  be->add_option("--reps", be_reps, "Timed repetitions")->check(CLI::PositiveNumber);
  be->add_flag("--parallel", be_parallel, "Use all hardware threads");
  be->add_option("--csv", be_csv, "Also write the machine-readable lines to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    configure_threads(true);

    if (*gen) {
      const Extent3 shape = parse_triple(gen_shape, "--shape");
      PhantomSpec spec = PhantomSpec::standard(gen_tasks, gen_seed);
      spec.noise_sigma = gen_noise;
      const int test = static_cast<int>(gen_per_task * gen_test_fraction + 0.5);
      const auto samples = generate_dataset(spec, gen_per_task - test, test, shape);
      write_dataset(gen_out, samples);
      std::cout << "wrote " << samples.size() << " samples to " << gen_out << '\n';
      return 0;
    }

    if (*tr) {
      const auto samples = read_dataset(tr_data);
      const auto train_sets = group_by_task(samples, Split::train);
      const auto test_sets = group_by_task(samples, Split::test);
      ModelConfig mc = preset(tr_config, num_tasks_in(samples));
      tc.patch = tr_patch.empty() ? (tr_config == "paper" ? Extent3{64, 192, 192} : Extent3{16, 32, 32})
                                  : parse_triple(tr_patch, "--patch");
      auto net = build_network(parse_architecture(tr_arch), mc, tc.seed);
      SgdMomentum opt(net->parameters().tensors(), tc.momentum);
      std::filesystem::create_directories(tr_out);
      std::ofstream log(std::filesystem::path(tr_out) / "metrics.log");
      TrainHooks hooks;
      hooks.validation = test_sets;
      hooks.checkpoint_dir = std::filesystem::path(tr_out);
      hooks.log = &log;
      const auto result = train(*net, opt, train_sets, tc, hooks);
      const auto& final_eval = result.last ? result.last : result.best;
      std::cout << "trained " << result.losses.size() << " steps, final loss " << result.losses.back() << '\n';
      if (final_eval) {
        for (const auto& s : final_eval->scores) {
          std::cout << "task" << s.task << '/' << s.structure << " dice " << s.dice << '\n';
        }
      }
      return 0;
    }

    if (*ev) {
      const auto ckpt = load_checkpoint(resolve_checkpoint(ev_ckpt));
      auto net = restore_network(ckpt);
      const auto samples = read_dataset(ev_data);
      const auto sets = group_by_task(samples, ev_split == "train" ? Split::train : Split::test);
      if (sets.empty()) throw std::runtime_error("no samples in the " + ev_split + " split");
      const Extent3 window =
          ev_window.empty() ? sets.front().samples.front().image.shape : parse_triple(ev_window, "--window");
      const auto result = evaluate(*net, sets, window);
      std::cout << "task,structure,dice,hausdorff,samples\n";
      for (const auto& s : result.scores) {
        std::cout << s.task << ',' << s.structure << ',' << s.dice << ','
                  << (s.hausdorff ? std::to_string(*s.hausdorff) : std::string("nan")) << ',' << s.samples << '\n';
      }
      std::cout << "mean_dice," << result.mean_dice() << '\n';
      return 0;
    }

    if (*pr) {
      const auto ckpt = load_checkpoint(resolve_checkpoint(pr_ckpt));
      auto net = restore_network(ckpt);
      Volume in = read_volume(pr_in);
      const Extent3 window = pr_window.empty() ? in.shape : parse_triple(pr_window, "--window");
      const TensorF probs = sliding_window_predict(*net, in, pr_task, window);
      const auto organ = binarize(probs, 0);
      const auto tumor = binarize(probs, 1);
      Volume out;
      out.shape = in.shape;
      out.spacing = in.spacing;
      LabelVolume labels;
      labels.shape = in.shape;
      labels.values.resize(organ.size());
      out.values.resize(organ.size());
      for (std::size_t i = 0; i < organ.size(); ++i) {
        labels.values[i] = tumor[i] ? kTumor : (organ[i] ? kOrgan : kBackground);
        out.values[i] = labels.values[i];
      }
      out.labels = std::move(labels);
      write_volume(pr_out, out);
      std::cout << "wrote " << pr_out << ".hdr\n";
      return 0;
    }

    if (*be) {
      ModelConfig mc = preset(be_config, 1);
      const Extent3 shape = !be_shape.empty()       ? parse_triple(be_shape, "--shape")
                            : be_config == "paper" ? Extent3{64, 128, 128}
                                                   : Extent3{16, 32, 32};
      if (be_parallel) Eigen::setNbThreads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
      const auto report = run_bench(mc, be_tasks, shape, be_reps);
      std::cout << report.table() << '\n' << report.csv();
      if (!be_csv.empty()) {
        std::ofstream f(be_csv);
        f << report.csv();
        if (!f) throw std::runtime_error("cannot write " + be_csv);
      }
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
