#pragma once

#include <mutex>
#include <string>
#include <vector>

#include "acrfence/simlab/mock_server.hpp"

namespace acrfence::simlab {

/// Simulated cloud provider: server creation is the irreversible effect.
class CloudServer {
public:
  CloudServer();

  void start() { server_.start(); }
  void stop() { server_.stop(); }
  std::string url() const { return server_.url(); }
  int port() const { return server_.port(); }

  int server_count() const;
  int request_count(const std::string& tool) const { return server_.request_count(tool); }
  Json request_counters() const { return server_.request_counters(); }
  Json state_json() const;

private:
  MockToolServer server_{"cloud"};
  mutable std::mutex mutex_;
  struct Instance {
    std::string server_id;
    std::string name;
    std::string region;
  };
  std::vector<Instance> instances_;
};

}  // namespace acrfence::simlab
