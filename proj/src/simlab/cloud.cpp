#include "acrfence/simlab/cloud.hpp"

namespace acrfence::simlab {

CloudServer::CloudServer() {
  server_.register_tool("create_server", "provision a server instance", [this](const Json& args) {
    std::lock_guard<std::mutex> lock(mutex_);
    std::string name = args.value("name", "");
    if (name.empty()) throw ToolError{-32602, "create_server needs a name"};
    Instance inst;
    inst.server_id = "srv-" + std::to_string(instances_.size() + 1);
    inst.name = name;
    inst.region = args.value("region", "default");
    instances_.push_back(inst);
    return Json{{"name", inst.name}, {"region", inst.region}, {"server_id", inst.server_id}};
  });
  server_.register_tool("list_servers", "list provisioned instances", [this](const Json&) {
    std::lock_guard<std::mutex> lock(mutex_);
    Json out = Json::array();
    for (const auto& inst : instances_) out.push_back(inst.server_id);
    return Json{{"servers", out}};
  });
}

int CloudServer::server_count() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return static_cast<int>(instances_.size());
}

Json CloudServer::state_json() const {
  std::lock_guard<std::mutex> lock(mutex_);
  Json out = Json::array();
  for (const auto& inst : instances_) {
    out.push_back(
        Json{{"name", inst.name}, {"region", inst.region}, {"server_id", inst.server_id}});
  }
  return Json{{"instances", out}};
}

}  // namespace acrfence::simlab
