#ifndef DEFECT_CHAIN_EXTERNAL_MODEL_HPP
#define DEFECT_CHAIN_EXTERNAL_MODEL_HPP

// Strength model backed by an external program. For each sample the wrinkle
// field is written as x1_mm,x3_mm,W_mm and the command is run with that file
// as its last argument; it must print {"M_c": <number>} on stdout.

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "defect_chain/error.hpp"
#include "defect_chain/klfield.hpp"
#include "defect_chain/propagate.hpp"

namespace defect_chain::propagate {

struct ExternalModelConfig {
  std::string command;
  std::string work_dir;
  double timeout_s = 600.0;
  int retries = 1;  // extra attempts after a failure
  int grid_x1 = 129;
  int grid_x3 = 33;
  double fidelity = 0.0;

  void validate() const {
    if (command.empty()) throw ParameterError("external model command is empty");
    if (work_dir.empty()) throw ParameterError("external model needs a work directory");
    if (!(timeout_s > 0.0)) throw ParameterError("external model timeout must be positive");
    if (retries < 0) throw ParameterError("retries must be >= 0");
    if (grid_x1 < 2 || grid_x3 < 2) throw ParameterError("field grid needs at least 2 points per axis");
  }
};

struct ProcessResult {
  bool timed_out = false;
  int exit_status = -1;
};

/// Runs `sh -c command` with stdout sent to `stdout_path`, killing it after
/// the timeout.
inline ProcessResult run_process(const std::string& command, const std::string& stdout_path,
                                 double timeout_s) {
  const pid_t pid = fork();
  if (pid < 0) throw IoError("fork failed");
  if (pid == 0) {
    const int fd = ::open(stdout_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) _exit(127);
    ::dup2(fd, STDOUT_FILENO);
    ::close(fd);
    ::setpgid(0, 0);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  ProcessResult r;
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  int status = 0;
  for (;;) {
    const pid_t w = ::waitpid(pid, &status, WNOHANG);
    if (w == pid) break;
    if (w < 0) throw IoError("waitpid failed");
    if (std::chrono::steady_clock::now() > deadline) {
      ::kill(-pid, SIGKILL);
      ::kill(pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      r.timed_out = true;
      return r;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  r.exit_status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

class ExternalStrengthModel : public ForwardStrengthModel {
 public:
  ExternalStrengthModel(ExternalModelConfig cfg, std::shared_ptr<const klfield::BasisCache> cache,
                        klfield::DecaySpec decay)
      : cfg_(std::move(cfg)), cache_(std::move(cache)), decay_(decay) {
    cfg_.validate();
    std::filesystem::create_directories(cfg_.work_dir);
  }

  double evaluate(const WrinkleParams& xi, std::size_t sample_id) const override {
    const auto stem = (std::filesystem::path(cfg_.work_dir) / ("sample_" + std::to_string(sample_id))).string();
    write_field(xi, stem + ".csv");
    const std::string cmd = cfg_.command + " " + shell_quote(stem + ".csv");
    std::string last;
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      const auto r = run_process(cmd, stem + ".out", cfg_.timeout_s);
      if (r.timed_out) {
        last = "timed out after " + std::to_string(cfg_.timeout_s) + " s";
        continue;
      }
      if (r.exit_status != 0) {
        last = "exited with status " + std::to_string(r.exit_status);
        continue;
      }
      try {
        std::ifstream in(stem + ".out");
        const auto j = nlohmann::json::parse(in);
        const double mc = j.at("M_c").get<double>();
        if (!(mc > 0.0) || !std::isfinite(mc)) throw DataError("M_c must be positive");
        return mc;
      } catch (const std::exception& e) {
        last = std::string("unreadable output: ") + e.what();
      }
    }
    throw NumericalError("external model failed on sample " + std::to_string(sample_id) + ": " + last);
  }

  std::string id() const override { return "external:" + cfg_.command; }
  double fidelity() const override { return cfg_.fidelity; }
  std::string bias_note() const override {
    return "discretisation bias of the external model is not estimated here";
  }

  void write_field(const WrinkleParams& xi, const std::string& path) const {
    const klfield::WrinkleField field(xi, *cache_->get(xi.length_scale), decay_);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out.precision(17);
    out << "x1_mm,x3_mm,W_mm\n";
    for (int i = 0; i < cfg_.grid_x1; ++i) {
      const double x1 = decay_.length_mm * i / (cfg_.grid_x1 - 1);
      for (int k = 0; k < cfg_.grid_x3; ++k) {
        const double x3 = decay_.depth_mm * k / (cfg_.grid_x3 - 1);
        out << x1 << ',' << x3 << ',' << field.displacement({x1, x3}) << '\n';
      }
    }
  }

 private:
  ExternalModelConfig cfg_;
  std::shared_ptr<const klfield::BasisCache> cache_;
  klfield::DecaySpec decay_;
};

}  // namespace defect_chain::propagate

#endif  // DEFECT_CHAIN_EXTERNAL_MODEL_HPP
