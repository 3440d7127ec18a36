#include "veroi/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool quantized = false;
  std::string method;
  std::vector<std::string> set;
};

veroi::PipelineConfig resolve(const Overrides& o) {
  veroi::PipelineConfig c = o.config.empty() ? veroi::PipelineConfig{} : veroi::load_config(o.config);
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw veroi::Error(veroi::Errc::kParse, "--set expects key=value, got '" + kv + "'");
    veroi::set_config(c, veroi::detail::trim(kv.substr(0, eq)), veroi::detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) c.seed = *o.seed;
  if (o.quantized) c.quantized = true;
  if (!o.method.empty()) c.method = o.method;
  return c;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "key = value configuration file");
  cmd->add_option("--seed", o.seed, "random seed");
  cmd->add_flag("--quantized", o.quantized, "use the WNPQ-quantized index");
  cmd->add_option("--method", o.method, "global | fast | subquery | root");
  cmd->add_option("--set", o.set, "override a config key (key=value), repeatable");
}

std::optional<veroi::Rect> parse_roi(const std::vector<float>& v) {
  if (v.empty()) return std::nullopt;
  if (v.size() != 4) throw veroi::Error(veroi::Errc::kParse, "--roi expects X,Y,W,H");
  return veroi::Rect{v[0], v[1], v[2], v[3]};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"veroi: region-aware compact image retrieval"};
  app.require_subcommand(1);
  Overrides o;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset with ground truth");
  std::string synth_out = "synth";
  synth->add_option("--out", synth_out, "output directory");
  add_common(synth, o);

  auto* vocab = app.add_subcommand("train-vocab", "train the visual vocabulary");
  add_common(vocab, o);
  auto* pca = app.add_subcommand("train-pca", "train the PCA rotation");
  add_common(pca, o);
  auto* pq = app.add_subcommand("train-pq", "train the product quantizer");
  add_common(pq, o);
  auto* encode = app.add_subcommand("encode", "encode the test set into an index");
  add_common(encode, o);

  auto* query = app.add_subcommand("query", "rank the indexed images for one feature file");
  std::string query_file;
  std::vector<float> roi;
  query->add_option("features", query_file, "query .vfea file")->required();
  query->add_option("--roi", roi, "region of interest: X,Y,W,H")->delimiter(',')->expected(4);
  add_common(query, o);

  auto* eval = app.add_subcommand("eval", "mAP and complexity over the query file");
  add_common(eval, o);
  auto* bench = app.add_subcommand("bench", "M sweep; CSV on stdout");
  add_common(bench, o);

  CLI11_PARSE(app, argc, argv);

  const veroi::Diagnostics diag{&std::cerr};
  try {
    const auto cfg = resolve(o);
    if (*synth) {
      const auto out = veroi::cmd_synth(cfg, synth_out);
      std::cout << "wrote " << out.test_images << " test and " << out.train_images << " training images; config "
                << out.config.generic_string() << '\n';
    } else if (*vocab) {
      const auto v = veroi::cmd_train_vocab(cfg, diag);
      std::cout << "vocabulary: " << v.size() << " words of dimension " << v.dim() << " -> " << cfg.vocab_path << '\n';
    } else if (*pca) {
      const auto m = veroi::cmd_train_pca(cfg, diag);
      std::cout << "pca: " << m.input_dim() << " -> " << m.output_dim() << " from " << m.training_count << " images -> "
                << cfg.pca_path << '\n';
    } else if (*pq) {
      const auto m = veroi::cmd_train_pq(cfg, diag);
      std::cout << "pq: M=" << m.blocks << " Z'=" << m.centroids << " -> " << cfg.pq_path << '\n';
    } else if (*encode) {
      const auto f = veroi::cmd_encode(cfg, diag);
      std::cout << "index: " << f.image_count() << " images, " << f.cells_per_image() << " cells each -> "
                << cfg.index_path << '\n';
    } else if (*query) {
      veroi::cmd_query(cfg, query_file, parse_roi(roi), std::cout);
    } else if (*eval) {
      veroi::cmd_eval(cfg, std::cout);
    } else if (*bench) {
      veroi::cmd_bench(cfg, std::cout);
    }
  } catch (const veroi::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
