// fedorch-server: coordinator process with the node listener and the HTTP control API.

#include <atomic>
#include <csignal>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "httplib.h"

#include "fedorch/control.hpp"
#include "fedorch/service.hpp"

using namespace fedorch;

int main(int argc, char** argv) {
  CLI::App app{"Federated learning coordinator"};
  std::string config_path, resume_path;
  app.add_option("--config", config_path, "server config (JSON)")->required();
  app.add_option("--resume", resume_path, "checkpoint file to resume from");
  CLI11_PARSE(app, argc, argv);

  ServerConfig cfg;
  std::optional<Federation> fed;
  try {
    cfg = load_server_config(config_path);
    if (resume_path.empty()) {
      fed.emplace(cfg.federation);
    } else {
      fed.emplace(Federation::restore(cfg.federation, resume_path));
    }
  } catch (const Error& e) {
    log_line(&std::cerr, "fatal", {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
    return 3;
  }
  const std::string op_token = operator_token_from_env();
  if (op_token.empty()) {
    log_line(&std::cerr, "fatal",
             {{"error", "FatalConfigError"}, {"message", "set FEDORCH_OPERATOR_TOKEN to enable the control API"}});
    return 3;
  }

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  FederationService svc(cfg, std::move(*fed), &std::cerr);
  ControlApi api(svc, op_token);
  httplib::Server http;
  auto route = [&](const httplib::Request& req, httplib::Response& res) {
    HttpResponse r = api.handle(req.method, req.path, req.get_header_value("Authorization"));
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  http.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                            {"Access-Control-Allow-Headers", "Authorization, Content-Type"},
                            {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  http.Get(R"(/.*)", route);
  http.Post(R"(/.*)", route);
  http.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  try {
    svc.start();
  } catch (const Error& e) {
    log_line(&std::cerr, "fatal", {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
    return 1;
  }
  const int control_port = cfg.control_port == 0 ? http.bind_to_any_port(cfg.control_host)
                                                 : (http.bind_to_port(cfg.control_host, cfg.control_port) ? cfg.control_port : -1);
  if (control_port < 0) {
    log_line(&std::cerr, "fatal", {{"error", "IoError"}, {"message", "cannot bind control API"}});
    svc.stop();
    return 1;
  }
  log_line(&std::cerr, "control_listening", {{"host", cfg.control_host}, {"port", std::to_string(control_port)}});
  std::thread http_thread([&] { http.listen_after_bind(); });

  std::atomic<bool> exiting{false};
  std::thread signal_thread([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    if (exiting) return;
    log_line(&std::cerr, "signal", {{"signal", std::to_string(sig)}});
    svc.request_stop();
  });

  svc.wait();
  http.stop();
  http_thread.join();
  exiting = true;
  pthread_kill(signal_thread.native_handle(), SIGTERM);
  signal_thread.join();
  return svc.federation().state().status == RoundStatus::Finished ? 0 : 1;
}
