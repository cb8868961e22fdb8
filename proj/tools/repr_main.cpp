// SPDX-License-Identifier: Apache-2.0
// Command-line front end: repr train|compare|oracle|analyze --config PATH [--key value ...]

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "repr/config.hpp"
#include "repr/errors.hpp"
#include "repr/experiment.hpp"

namespace {

// Turns the leftover "--key value" / "--key=value" arguments into overrides.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw repr::ConfigError("unexpected argument '" + arg + "'");
    arg = arg.substr(2);
    const auto eq = arg.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(arg.substr(0, eq), arg.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw repr::ConfigError("flag --" + arg + " needs a value");
      out.emplace_back(arg, extras[++i]);
    }
  }
  return out;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cyclic filter pruning and orthogonal re-initialization for small ConvNets"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<CLI::App*> subs;
  for (const char* name : {"train", "compare", "oracle", "analyze"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->allow_extras();
    subs.push_back(sub);
  }
  subs[0]->description("train one run; writes metrics.csv, events.csv and checkpoints");
  subs[1]->description("train a baseline and a cyclic run from the same initialization");
  subs[2]->description("score every filter by its held-out accuracy drop");
  subs[3]->description("activation correlations and metric agreement for a checkpoint");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* sub = app.get_subcommands().front();
    repr::ConfigSources sources;
    if (!config_path.empty()) sources.file = config_path;
    if (const char* env = std::getenv("REPR_OUT_DIR")) sources.env_out_dir = std::string(env);
    sources.flags = parse_overrides(sub->remaining());
    const repr::RunConfig config = repr::parse_config(sources);

    const std::string name = sub->get_name();
    if (name == "train") return repr::cmd_train(config, std::cout);
    if (name == "compare") return repr::cmd_compare(config, std::cout);
    if (name == "oracle") return repr::cmd_oracle(config, std::cout);
    return repr::cmd_analyze(config, std::cout);
  } catch (const repr::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const repr::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const repr::TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
