// Prints a checkpoint's model configuration and parameter inventory as JSON.

#include <attnlens/checkpoint.hpp>

#include <iostream>

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: ckpt_info <checkpoint>\n";
    return 2;
  }
  try {
    const attnlens::Checkpoint ckpt = attnlens::load_checkpoint(argv[1]);
    nlohmann::json params = nlohmann::json::array();
    std::size_t total = 0;
    ckpt.params.for_each([&](const std::string& name, const attnlens::Tensor& t) {
      params.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
      total += t.size();
    });
    nlohmann::json extras = nlohmann::json::array();
    for (const auto& [name, t] : ckpt.extras)
      extras.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    std::cout << nlohmann::json{{"config", ckpt.config.to_json()},
                                {"total_parameters", total},
                                {"tensors", params},
                                {"extras", extras},
                                {"extra", ckpt.extra}}
                     .dump(2)
              << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
