// fedorch-node: site agent. Exit codes: 0 finished, 1 other shutdown, 2 auth rejected, 3 config error.

#include <atomic>
#include <csignal>
#include <iostream>

#include "CLI11.hpp"

#include "fedorch/node_client.hpp"

using namespace fedorch;

namespace {
std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning site agent"};
  std::string config_path;
  app.add_option("--config", config_path, "node config (JSON)")->required();
  CLI11_PARSE(app, argc, argv);

  NodeConfig cfg;
  try {
    cfg = load_node_config(config_path);
  } catch (const Error& e) {
    log_line(&std::cerr, "fatal", {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
    return kExitConfigError;
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::signal(SIGPIPE, SIG_IGN);
  return run_agent(cfg, AgentRunOptions{&std::cerr, &g_stop});
}
