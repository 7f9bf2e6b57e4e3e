// ktrans: preprocess, train, translate, evaluate and report.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 usage, 3 data, 4 divergence.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ktrans/checkpoint.hpp"
#include "ktrans/cli.hpp"

using namespace ktrans;
using namespace ktrans::cli;

namespace {

LanguageProfile profile_arg(const std::string& s) {
  try {
    return parse_profile(s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ktrans: K-Means recalibrated Transformer translation engine"};
  app.require_subcommand(1);

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "tokenize a parallel corpus and build vocabularies");
  PreprocessOptions po;
  std::string profile_src = "space_tokenized", profile_tgt = "space_tokenized";
  std::string valid_src, valid_tgt, pre_out;
  pre->add_option("--src", po.src, "source text, one sentence per line")->required()->check(CLI::ExistingFile);
  pre->add_option("--tgt", po.tgt, "target text, aligned by line")->required()->check(CLI::ExistingFile);
  pre->add_option("--profile-src", profile_src, "space_tokenized | char_tokenized")->capture_default_str();
  pre->add_option("--profile-tgt", profile_tgt, "space_tokenized | char_tokenized")->capture_default_str();
  pre->add_option("--valid-src", valid_src, "optional validation source")->check(CLI::ExistingFile);
  pre->add_option("--valid-tgt", valid_tgt, "optional validation target")->check(CLI::ExistingFile);
  pre->add_option("--out-dir", pre_out, "output directory (default $KTRANS_RUN_DIR/data or data)");
  pre->add_option("--max-len", po.max_len, "length filter in tokens")->capture_default_str();
  pre->add_option("--max-vocab", po.max_vocab, "vocabulary size including reserved ids")->capture_default_str();
  pre->add_option("--min-freq", po.min_freq, "minimum token count")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train a model on a preprocessed corpus");
  std::string config_path, cluster_mode, tr_out, data_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;
  std::vector<std::string> sets;
  tr->add_option("--config", config_path, "key = value run configuration")->check(CLI::ExistingFile);
  tr->add_option("--cluster-mode", cluster_mode, "off | same_cluster | centroid_affinity | both");
  tr->add_option("--seed", seed, "seed for initialisation, batch order and dropout");
  tr->add_option("--out-dir", tr_out, "run directory (default $KTRANS_RUN_DIR or run)");
  tr->add_option("--data-dir", data_dir, "preprocessed corpus directory");
  tr->add_option("--max-steps", max_steps, "training steps");
  tr->add_option("--set", sets, "extra KEY=VALUE override, repeatable");
  bool quiet = false;
  tr->add_flag("--quiet", quiet, "no progress output");

  // translate
  auto* tl = app.add_subcommand("translate", "greedy-translate a text file");
  TranslateOptions to;
  tl->add_option("--checkpoint", to.checkpoint)->required()->check(CLI::ExistingFile);
  tl->add_option("--input", to.input)->required()->check(CLI::ExistingFile);
  tl->add_option("--output", to.output)->required();
  tl->add_option("--max-out-len", to.max_out_len)->capture_default_str();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "corpus BLEU of a hypothesis file");
  std::string hyp, ref;
  std::size_t order = 4;
  std::string smooth = "off";
  ev->add_option("--hyp", hyp)->required()->check(CLI::ExistingFile);
  ev->add_option("--ref", ref)->required()->check(CLI::ExistingFile);
  ev->add_option("--n", order, "maximum n-gram order")->capture_default_str()->check(CLI::Range(1, 16));
  ev->add_option("--smooth", smooth, "on | off")->capture_default_str()->check(CLI::IsMember({"on", "off"}));

  // report
  auto* rp = app.add_subcommand("report", "length-bucketed BLEU comparison (CSV, SVG, summary)");
  std::vector<std::string> systems;
  std::string rp_ref, rp_src, buckets = "10,20,30,40,50", rp_out, dataset = "test";
  std::string rp_smooth = "off";
  rp->add_option("--system", systems, "NAME=HYPOTHESIS_FILE, repeatable")->required();
  rp->add_option("--ref", rp_ref)->required()->check(CLI::ExistingFile);
  rp->add_option("--src", rp_src, "tokenized source for bucketing (default: reference length)")
      ->check(CLI::ExistingFile);
  rp->add_option("--buckets", buckets, "bucket upper edges")->capture_default_str();
  rp->add_option("--out", rp_out, "output prefix (default $KTRANS_RUN_DIR/report or report)");
  rp->add_option("--dataset", dataset, "column label in the summary table")->capture_default_str();
  rp->add_option("--smooth", rp_smooth, "on | off")->capture_default_str()->check(CLI::IsMember({"on", "off"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*pre) {
      po.profile_src = profile_arg(profile_src);
      po.profile_tgt = profile_arg(profile_tgt);
      if (!valid_src.empty()) po.valid_src = valid_src;
      if (!valid_tgt.empty()) po.valid_tgt = valid_tgt;
      po.out_dir = pre_out.empty() ? default_run_dir(".") / "data" : std::filesystem::path(pre_out);
      const auto s = cmd_preprocess(po);
      std::cout << "pairs " << s.pairs_total << " kept " << s.pairs_kept << " (max_len " << po.max_len
                << ")\nvocab src " << s.src_vocab << " tgt " << s.tgt_vocab << "\nwritten to "
                << po.out_dir.string() << "\n";
    } else if (*tr) {
      RunConfig rc;
      rc.out_dir = default_run_dir();
      rc.data_dir = default_run_dir(".") / "data";
      if (!config_path.empty()) rc.apply_file(config_path);
      if (!cluster_mode.empty()) rc.set("cluster_mode", cluster_mode);
      if (seed) rc.set("seed", std::to_string(*seed));
      if (max_steps) rc.set("max_steps", std::to_string(*max_steps));
      if (!data_dir.empty()) rc.set("data_dir", data_dir);
      if (!tr_out.empty()) rc.set("out_dir", tr_out);
      for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
        rc.set(kv.substr(0, eq), kv.substr(eq + 1));
      }
      const auto outcome = cmd_train(rc, quiet ? nullptr : &std::cout);
      if (outcome.result.status == TrainStatus::diverged) {
        std::cerr << "ktrans: " << outcome.result.message << "; last good weights kept in "
                  << (outcome.out_dir / "final.ckpt").string() << "\n";
        return kExitDiverged;
      }
      std::cout << "trained " << outcome.result.steps << " steps; checkpoint "
                << (outcome.out_dir / "final.ckpt").string() << "\n";
    } else if (*tl) {
      const auto n = cmd_translate(to);
      std::cerr << "translated " << n << " lines\n";
    } else if (*ev) {
      BleuOptions opt;
      opt.n_max = order;
      opt.smooth = smooth == "on";
      std::cout << format_evaluation(cmd_evaluate(hyp, ref, opt));
    } else if (*rp) {
      ReportOptions ro;
      for (const auto& s : systems) ro.systems.push_back(parse_system_spec(s));
      ro.ref = rp_ref;
      if (!rp_src.empty()) ro.src = rp_src;
      ro.edges = parse_edges(buckets);
      ro.out = rp_out.empty() ? default_run_dir(".") / "report" : std::filesystem::path(rp_out);
      ro.dataset = dataset;
      ro.bleu.smooth = rp_smooth == "on";
      for (const auto& s : cmd_report(ro)) {
        std::cout << s.name << " BLEU " << s.overall.score * 100.0 << "\n";
      }
      std::cout << "wrote " << ro.out.string() << ".csv, .svg, _summary.csv\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "ktrans: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "ktrans: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "ktrans: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "ktrans: error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}
