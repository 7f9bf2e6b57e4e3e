#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "ktrans/cli.hpp"

using namespace ktrans;
using namespace ktrans::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ktrans_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

// Capitalised source with punctuation, upper-case target: both survive
// preprocessing as the same lowercase words.
void write_toy_corpus(const fs::path& dir, std::size_t pairs, std::uint64_t seed) {
  static const char* words[] = {"alpha", "beta", "gamma", "delta", "eps", "zeta"};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(2, 7), pick(0, 5);
  std::ostringstream src, tgt;
  for (std::size_t i = 0; i < pairs; ++i) {
    const int n = len(rng);
    std::string s, t;
    for (int k = 0; k < n; ++k) {
      const std::string w = words[pick(rng)];
      s += (k ? " " : "") + (k == 0 ? std::string(1, static_cast<char>(w[0] - 32)) + w.substr(1) : w);
      std::string up = w;
      for (auto& c : up) c = static_cast<char>(c - 32);
      t += (k ? " " : "") + up;
    }
    src << s << ".\n";
    tgt << t << "\n";
  }
  spit(dir / "src.txt", src.str());
  spit(dir / "tgt.txt", tgt.str());
}

RunConfig tiny_run(const fs::path& data, const fs::path& out) {
  RunConfig rc;
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"d_model", "16"}, {"heads", "2"}, {"d_ff", "32"}, {"layers_enc", "1"}, {"layers_dec", "1"},
           {"max_steps", "20"}, {"batch_size", "8"}, {"learning_rate", "0.003"}, {"val_interval", "10"},
           {"val_max_pairs", "8"}, {"max_len", "20"}})
    rc.set(k, v);
  rc.data_dir = data;
  rc.out_dir = out;
  return rc;
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(KTRANS_TOOL_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t count_lines(const fs::path& p) {
  std::size_t n = 0;
  for (char c : slurp(p)) n += c == '\n';
  return n;
}

std::string strip_wall_ms(const std::string& log) {
  std::istringstream in(log);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

}  // namespace

TEST_CASE("RunConfig: defaults, overrides, unknown keys and echo round trip") {
  RunConfig rc;
  CHECK(rc.model.d_model == 512);
  CHECK(rc.train.learning_rate == 3e-4);
  rc.set("learning_rate", "0.5");
  rc.set("cluster_mode", "off");
  rc.set("seed", "9");
  CHECK(rc.train.learning_rate == 0.5);
  CHECK(rc.train.seed == 9);
  CHECK(rc.model.seed == 9);
  CHECK_THROWS_AS(rc.set("learnin_rate", "1"), UsageError);
  CHECK_THROWS_AS(rc.set("d_model", "-3"), UsageError);
  CHECK_THROWS_AS(rc.set("dropout", "abc"), UsageError);
  CHECK_THROWS_AS(rc.set("cluster_mode", "sometimes"), UsageError);

  const auto dir = scratch_dir("config");
  spit(dir / "a.cfg", rc.to_text());
  const auto back = RunConfig::load(dir / "a.cfg");
  CHECK(back.to_text() == rc.to_text());
  for (const auto& key : RunConfig::keys()) CHECK(rc.to_text().find("\n" + key + " = ") != std::string::npos);

  spit(dir / "b.cfg", "# comment\n\nd_model = 64  # trailing\nheads=4\n");
  const auto b = RunConfig::load(dir / "b.cfg");
  CHECK(b.model.d_model == 64);
  CHECK(b.model.heads == 4);
  spit(dir / "c.cfg", "d_model = 64\ntypo_key = 1\n");
  CHECK_THROWS_WITH_AS(RunConfig::load(dir / "c.cfg"), doctest::Contains(":2:"), UsageError);
  spit(dir / "d.cfg", "just words\n");
  CHECK_THROWS_AS(RunConfig::load(dir / "d.cfg"), UsageError);
}

TEST_CASE("preprocess: stats, errors and byte-identical reruns") {
  const auto dir = scratch_dir("pre");
  write_toy_corpus(dir, 30, 1);
  // two over-length pairs and one pair with an empty target
  {
    std::ofstream s(dir / "src.txt", std::ios::app), t(dir / "tgt.txt", std::ios::app);
    std::string long_line;
    for (int i = 0; i < 51; ++i) long_line += "w ";
    s << long_line << "\nshort\nfine\n";
    t << "x\n" << long_line << "\n\n";
  }
  PreprocessOptions o;
  o.src = dir / "src.txt";
  o.tgt = dir / "tgt.txt";
  o.out_dir = dir / "out";
  const auto stats = cmd_preprocess(o);
  CHECK(stats.pairs_total == count_lines(dir / "src.txt"));
  CHECK(stats.pairs_kept == stats.pairs_total - 3);
  CHECK(count_lines(o.out_dir / "train.src.tok") == stats.pairs_total);
  CHECK(count_lines(o.out_dir / "vocab.src.txt") + 4 == stats.src_vocab);
  const auto first = slurp(o.out_dir / "train.tgt.tok") + slurp(o.out_dir / "vocab.tgt.txt") +
                     slurp(o.out_dir / "stats.txt");
  cmd_preprocess(o);
  CHECK(slurp(o.out_dir / "train.tgt.tok") + slurp(o.out_dir / "vocab.tgt.txt") +
            slurp(o.out_dir / "stats.txt") ==
        first);
  const auto tok = slurp(o.out_dir / "train.src.tok") + slurp(o.out_dir / "train.tgt.tok");
  CHECK(std::none_of(tok.begin(), tok.end(), [](char c) { return c >= 'A' && c <= 'Z'; }));
  CHECK(slurp(o.out_dir / "train.src.tok").find(" .\n") != std::string::npos);

  spit(dir / "empty_a.txt", "");
  spit(dir / "empty_b.txt", "");
  PreprocessOptions e = o;
  e.src = dir / "empty_a.txt";
  e.tgt = dir / "empty_b.txt";
  CHECK_THROWS_WITH_AS(cmd_preprocess(e), doctest::Contains("empty corpus"), DataError);
  spit(dir / "one.txt", "only one line\n");
  e.src = dir / "one.txt";
  e.tgt = dir / "tgt.txt";
  CHECK_THROWS_AS(cmd_preprocess(e), DataError);
}

TEST_CASE("train/translate/evaluate: in-process pipeline") {
  const auto dir = scratch_dir("pipeline");
  write_toy_corpus(dir, 40, 2);
  PreprocessOptions o;
  o.src = o.valid_src.emplace(dir / "src.txt");
  o.tgt = o.valid_tgt.emplace(dir / "tgt.txt");
  o.out_dir = dir / "data";
  cmd_preprocess(o);

  SUBCASE("zero steps writes only the initial checkpoint") {
    auto rc = tiny_run(dir / "data", dir / "zero");
    rc.set("max_steps", "0");
    const auto out = cmd_train(rc);
    CHECK(out.result.steps == 0);
    CHECK(fs::exists(dir / "zero" / "final.ckpt"));
    CHECK_FALSE(fs::exists(dir / "zero" / "best.ckpt"));
    CHECK(RunConfig::load(dir / "zero" / "config.resolved").to_text() == slurp(dir / "zero" / "config.resolved"));
  }

  SUBCASE("same config reproduces bytes; seeds and modes differ") {
    auto a = tiny_run(dir / "data", dir / "a");
    auto b = tiny_run(dir / "data", dir / "b");
    const auto ra = cmd_train(a).result;
    const auto rb = cmd_train(b).result;
    CHECK(slurp(dir / "a" / "final.ckpt") == slurp(dir / "b" / "final.ckpt"));
    CHECK(strip_wall_ms(slurp(dir / "a" / "train_log.csv")) == strip_wall_ms(slurp(dir / "b" / "train_log.csv")));
    CHECK(ra.log.back().loss == rb.log.back().loss);

    auto c = tiny_run(dir / "data", dir / "c");
    c.set("seed", "2");
    CHECK(cmd_train(c).result.log.back().loss != ra.log.back().loss);

    auto off = tiny_run(dir / "data", dir / "off");
    off.set("cluster_mode", "off");
    cmd_train(off);
    CHECK(slurp(dir / "off" / "config.resolved").find("cluster_mode = off") != std::string::npos);

    // round trip of the echoed config reproduces the run
    auto echoed = RunConfig::load(dir / "a" / "config.resolved");
    echoed.out_dir = dir / "a2";
    cmd_train(echoed);
    CHECK(slurp(dir / "a2" / "final.ckpt") == slurp(dir / "a" / "final.ckpt"));

    TranslateOptions t;
    t.checkpoint = dir / "a" / "final.ckpt";
    t.input = dir / "src.txt";
    t.output = dir / "hyp1.txt";
    CHECK(cmd_translate(t) == count_lines(dir / "src.txt"));
    CHECK(count_lines(t.output) == count_lines(t.input));
    t.output = dir / "hyp2.txt";
    cmd_translate(t);
    CHECK(slurp(dir / "hyp1.txt") == slurp(dir / "hyp2.txt"));

    spit(dir / "empty.txt", "");
    t.input = dir / "empty.txt";
    t.output = dir / "empty_out.txt";
    CHECK(cmd_translate(t) == 0);
    CHECK(slurp(t.output).empty());

    auto f32 = tiny_run(dir / "data", dir / "f32");
    f32.set("dtype", "f32");
    f32.set("max_steps", "3");
    cmd_train(f32);
    t.checkpoint = dir / "f32" / "final.ckpt";
    t.input = dir / "src.txt";
    t.output = dir / "hyp_f32.txt";
    CHECK(cmd_translate(t) == count_lines(dir / "src.txt"));
  }
}

TEST_CASE("evaluate: identity, alignment and agreement with the library") {
  const auto dir = scratch_dir("eval");
  spit(dir / "ref.txt", "the cat sat on the mat\na b c d e\n");
  spit(dir / "hyp.txt", "the cat is on the mat\na b c d x\n");
  spit(dir / "short.txt", "one line\n");
  const auto id = cmd_evaluate(dir / "ref.txt", dir / "ref.txt", {});
  CHECK(id.score == 1.0);
  CHECK(format_evaluation(id).rfind("BLEU = 1.000000 (100.00)", 0) == 0);
  CHECK_THROWS_AS(cmd_evaluate(dir / "short.txt", dir / "ref.txt", {}), DataError);

  BleuOptions smooth;
  smooth.smooth = true;
  const auto got = cmd_evaluate(dir / "hyp.txt", dir / "ref.txt", smooth);
  const auto direct = corpus_bleu({{split_whitespace("the cat is on the mat"), split_whitespace("the cat sat on the mat")},
                                   {split_whitespace("a b c d x"), split_whitespace("a b c d e")}},
                                  smooth);
  CHECK(got.score == direct.score);
  CHECK(got.c == 11);
  CHECK(got.r == 11);
}

TEST_CASE("report: bucket partition and split-and-rescore") {
  const auto dir = scratch_dir("report");
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> len(1, 35), word(0, 4);
  std::ostringstream src, ref, h1, h2;
  std::vector<std::string> src_lines, ref_lines, h1_lines;
  for (int i = 0; i < 120; ++i) {
    auto sentence = [&](int n) {
      std::string s;
      for (int k = 0; k < n; ++k) s += (k ? " w" : "w") + std::to_string(word(rng));
      return s;
    };
    src_lines.push_back(sentence(len(rng)));
    ref_lines.push_back(sentence(1 + len(rng) % 9));
    h1_lines.push_back(sentence(1 + len(rng) % 9));
    src << src_lines.back() << "\n";
    ref << ref_lines.back() << "\n";
    h1 << h1_lines.back() << "\n";
    h2 << ref_lines.back() << "\n";
  }
  spit(dir / "src.tok", src.str());
  spit(dir / "ref.tok", ref.str());
  spit(dir / "base.txt", h1.str());
  spit(dir / "ktransf.txt", h2.str());

  ReportOptions o;
  o.systems = {{"baseline", dir / "base.txt"}, {"ktransf", dir / "ktransf.txt"}};
  o.ref = dir / "ref.tok";
  o.src = dir / "src.tok";
  o.out = dir / "out" / "report";
  o.bleu.smooth = true;
  const auto reports = cmd_report(o);
  REQUIRE(reports.size() == 2);
  for (std::size_t b = 0; b < reports[0].buckets.size(); ++b)
    CHECK(reports[0].buckets[b].pair_count == reports[1].buckets[b].pair_count);

  // split the files by hand, score each piece with cmd_evaluate, compare to CSV
  const auto csv = read_lines(dir / "out" / "report.csv");
  REQUIRE(csv.size() == 1 + 2 * 6);
  CHECK(csv[0] == "system,bucket_low,bucket_high,pair_count,bleu,p1,p2,p3,p4,bp");
  const std::vector<std::size_t> lows{0, 11, 21, 31, 41, 51}, highs{10, 20, 30, 40, 50, 1000};
  for (std::size_t b = 0; b < 6; ++b) {
    std::ostringstream hb, rb;
    std::size_t n = 0;
    for (std::size_t i = 0; i < src_lines.size(); ++i) {
      const auto l = split_whitespace(src_lines[i]).size();
      if (l < lows[b] || l > highs[b]) continue;
      hb << h1_lines[i] << "\n";
      rb << ref_lines[i] << "\n";
      ++n;
    }
    const auto& row = csv[1 + b];
    CHECK(row.rfind("baseline," + std::to_string(lows[b]) + ",", 0) == 0);
    std::istringstream fields(row);
    std::string name, lo, hi, count, bleu;
    std::getline(fields, name, ',');
    std::getline(fields, lo, ',');
    std::getline(fields, hi, ',');
    std::getline(fields, count, ',');
    std::getline(fields, bleu, ',');
    CHECK(count == std::to_string(n));
    if (n == 0) {
      CHECK(bleu.empty());
      continue;
    }
    spit(dir / "hb.txt", hb.str());
    spit(dir / "rb.txt", rb.str());
    char expect[32];
    std::snprintf(expect, sizeof expect, "%.6f", cmd_evaluate(dir / "hb.txt", dir / "rb.txt", o.bleu).score);
    CHECK(bleu == expect);
  }

  const auto svg = slurp(dir / "out" / "report.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  const auto summary = read_lines(dir / "out" / "report_summary.csv");
  REQUIRE(summary.size() == 3);
  CHECK(summary[0] == "model,test");
  CHECK(summary[2] == "ktransf,100.00");

  ReportOptions single = o;
  single.systems = {{"only", dir / "base.txt"}};
  single.out = dir / "single";
  const auto one = cmd_report(single);
  std::size_t populated = 0;
  for (const auto& b : one[0].buckets) populated += b.report.has_value();
  const auto single_svg = slurp(dir / "single.svg");
  std::size_t bars = 0;
  for (auto pos = single_svg.find("<title>"); pos != std::string::npos; pos = single_svg.find("<title>", pos + 1)) ++bars;
  CHECK(bars == populated);

  const auto again = slurp(dir / "out" / "report.csv") + svg;
  cmd_report(o);
  CHECK(slurp(dir / "out" / "report.csv") + slurp(dir / "out" / "report.svg") == again);

  CHECK_THROWS_AS(parse_system_spec("noequals"), UsageError);
  CHECK_THROWS_AS(parse_edges("10,5"), UsageError);
  CHECK(parse_edges("10,20") == std::vector<std::size_t>{10, 20});
}

TEST_CASE("executable: exit codes") {
  const auto dir = scratch_dir("exe");
  write_toy_corpus(dir, 12, 3);
  const auto d = dir.string();
  CHECK(run_tool("") == kExitUsage);
  CHECK(run_tool("frobnicate") == kExitUsage);
  CHECK(run_tool("preprocess --src " + d + "/src.txt --tgt " + d + "/tgt.txt --out-dir " + d + "/data") == kExitOk);
  CHECK(run_tool("train --data-dir " + d + "/data --out-dir " + d + "/run --max-steps 0 --set d_model=8 --set heads=2 --set d_ff=8 --quiet") == kExitOk);
  CHECK(fs::exists(dir / "run" / "final.ckpt"));
  CHECK(run_tool("train --data-dir " + d + "/data --out-dir " + d + "/run --set no_such_key=1") == kExitUsage);
  CHECK(run_tool("train --data-dir " + d + "/nowhere --out-dir " + d + "/run") == kExitData);
  spit(dir / "bad.ckpt", "garbage\n");
  CHECK(run_tool("translate --checkpoint " + d + "/bad.ckpt --input " + d + "/src.txt --output " + d + "/o.txt") == kExitData);
  spit(dir / "one.txt", "a\n");
  CHECK(run_tool("evaluate --hyp " + d + "/one.txt --ref " + d + "/tgt.txt") == kExitData);
  CHECK(run_tool("evaluate --hyp " + d + "/tgt.txt --ref " + d + "/tgt.txt") == kExitOk);

  // default run directory from the environment
  const std::string env_cmd = "KTRANS_RUN_DIR=" + d + "/envrun " + std::string(KTRANS_TOOL_PATH) +
                              " preprocess --src " + d + "/src.txt --tgt " + d + "/tgt.txt >/dev/null 2>&1";
  CHECK(std::system(env_cmd.c_str()) == 0);
  CHECK(fs::exists(dir / "envrun" / "data" / "stats.txt"));
}
