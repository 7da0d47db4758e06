#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "pace/config.hpp"
#include "pace/errors.hpp"
#include "pace/pipeline.hpp"

namespace {

int run(const std::string& cmd, const std::string& config_path, const std::string& image,
        const std::string& out_dir) {
  const pace::RunConfig cfg = pace::load_config(config_path);
  if (cmd == "gen") {
    pace::run_gen(cfg);
    std::printf("dataset written to %s\n", pace::paths_of(cfg).dataset_dir.c_str());
  } else if (cmd == "train-bb") {
    pace::run_train_bb(cfg);
    std::printf("black-box checkpoint written to %s\n", pace::paths_of(cfg).blackbox_file.c_str());
  } else if (cmd == "train-pace") {
    pace::run_train_pace(cfg);
    std::printf("explainer checkpoint written to %s\n", pace::paths_of(cfg).explainer_file.c_str());
  } else if (cmd == "baseline") {
    pace::run_baseline(cfg);
    std::printf("baseline checkpoint written to %s\n", pace::paths_of(cfg).baseline_file.c_str());
  } else if (cmd == "eval") {
    const pace::EvalOutputs out = pace::run_eval(cfg);
    std::fputs(pace::evaluation_summary(out.pace_agreement, &out.baseline_agreement, out.localization).c_str(),
               stdout);
    std::printf("reports written to %s\n", pace::paths_of(cfg).reports_dir.c_str());
  } else if (cmd == "explain") {
    const pace::Explanation ex = pace::run_explain(cfg, image, out_dir);
    std::printf("predicted class %zu\n", ex.predicted_label);
    for (const pace::ConceptReport& c : ex.concepts) {
      if (c.has_percent)
        std::printf("  concept %zu  relevance %+.4f  contribution %+.2f%%\n", c.index, c.relevance, c.percent);
      else
        std::printf("  concept %zu  relevance %+.4f\n", c.index, c.relevance);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"concept extraction and evaluation for a fixed CNN classifier"};
  app.require_subcommand(1);

  std::string config_path, image, out_dir;
  const char* names[] = {"gen", "train-bb", "train-pace", "baseline", "explain", "eval"};
  const char* blurbs[] = {"generate the synthetic parts dataset",
                          "train the CNN classifier",
                          "train the concept explainer",
                          "fit the PCA + k-means baseline",
                          "explain one image (PPM) with the trained explainer",
                          "compute agreement and localization reports"};
  for (int i = 0; i < 6; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], blurbs[i]);
    sub->add_option("--config", config_path, "run configuration file")->required();
    if (std::string(names[i]) == "explain") {
      sub->add_option("--image", image, "input PPM image")->required();
      sub->add_option("--out", out_dir, "output directory (default: the run's reports dir)");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    return run(app.get_subcommands().front()->get_name(), config_path, image, out_dir);
  } catch (const pace::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const pace::MissingArtifactError& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.what());
    return 3;
  } catch (const pace::FormatError& e) {
    std::fprintf(stderr, "artifact format error: %s\n", e.what());
    return 3;
  } catch (const pace::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
