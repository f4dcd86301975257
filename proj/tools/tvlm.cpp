#include <string>
#include <vector>

#include "tilevlm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tvlm::dispatch(args);
}
