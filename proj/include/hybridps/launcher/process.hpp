// SPDX-License-Identifier: Apache-2.0
#pragma once

// Child process spawning and supervision for multi-process runs. Each node
// is a re-execution of the launcher binary with its role, rank and the
// scheduler address in the environment.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstring>
#include <map>
#include <thread>

#include "hybridps/common.hpp"

extern char** environ;

namespace hps::launcher {

inline constexpr const char* kEnvRole = "HPS_ROLE";
inline constexpr const char* kEnvRank = "HPS_RANK";
inline constexpr const char* kEnvSchedAddr = "HPS_SCHED_ADDR";
inline constexpr const char* kEnvConfig = "HPS_CONFIG";
inline constexpr const char* kEnvPortFd = "HPS_PORT_FD";

struct ChildExit {
  std::string label;
  int code = 0;  // exit status, or 128 + signal
};

class ChildSet {
 public:
  ChildSet() = default;
  ChildSet(const ChildSet&) = delete;
  ChildSet& operator=(const ChildSet&) = delete;
  ~ChildSet() { kill_all(); }

  // Starts `exe` with the current environment plus `env`. Descriptors in
  // `keep_fds` stay open across exec; everything else the launcher opened
  // is close-on-exec.
  pid_t spawn(const std::string& exe, const std::string& label,
              const std::map<std::string, std::string>& env, std::vector<int> keep_fds = {}) {
    std::vector<std::string> entries;
    for (char** e = environ; *e; ++e) {
      std::string_view kv(*e);
      auto key = kv.substr(0, kv.find('='));
      if (!env.contains(std::string(key))) entries.emplace_back(kv);
    }
    for (const auto& [k, v] : env) entries.push_back(k + "=" + v);
    std::vector<char*> envp;
    for (auto& s : entries) envp.push_back(s.data());
    envp.push_back(nullptr);
    std::string arg0 = "hybridps";
    char* argv[] = {arg0.data(), nullptr};

    pid_t pid = ::fork();
    if (pid < 0) throw Error(std::string("fork failed: ") + std::strerror(errno));
    if (pid == 0) {
      for (int fd : keep_fds) ::fcntl(fd, F_SETFD, 0);
      ::execve(exe.c_str(), argv, envp.data());
      ::_exit(127);
    }
    running_[pid] = label;
    return pid;
  }

  std::size_t running() const { return running_.size(); }

  // Waits for one child; nullopt when none are left.
  std::optional<ChildExit> wait_one() {
    if (running_.empty()) return std::nullopt;
    int status = 0;
    pid_t pid;
    do {
      pid = ::waitpid(-1, &status, 0);
    } while (pid < 0 && errno == EINTR);
    if (pid < 0) throw Error(std::string("waitpid failed: ") + std::strerror(errno));
    auto it = running_.find(pid);
    if (it == running_.end()) return wait_one();
    ChildExit ex{it->second, 0};
    running_.erase(it);
    if (WIFEXITED(status)) ex.code = WEXITSTATUS(status);
    else if (WIFSIGNALED(status)) ex.code = 128 + WTERMSIG(status);
    return ex;
  }

  void kill_all() {
    for (const auto& [pid, label] : running_) ::kill(pid, SIGKILL);
    for (const auto& [pid, label] : running_) {
      int status;
      while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
      }
    }
    running_.clear();
  }

 private:
  std::map<pid_t, std::string> running_;
};

// Pipe whose both ends are close-on-exec.
struct Pipe {
  int read_fd = -1;
  int write_fd = -1;

  Pipe() {
    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) throw Error(std::string("pipe failed: ") + std::strerror(errno));
    read_fd = fds[0];
    write_fd = fds[1];
  }
  ~Pipe() {
    close_read();
    close_write();
  }
  Pipe(const Pipe&) = delete;
  Pipe& operator=(const Pipe&) = delete;

  void close_read() {
    if (read_fd >= 0) ::close(std::exchange(read_fd, -1));
  }
  void close_write() {
    if (write_fd >= 0) ::close(std::exchange(write_fd, -1));
  }

  // Reads one line; empty when the writer closed first.
  std::string read_line() {
    std::string s;
    char c;
    for (;;) {
      auto n = ::read(read_fd, &c, 1);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0 || c == '\n') break;
      s.push_back(c);
    }
    return s;
  }
};

}  // namespace hps::launcher
