#include <string>
#include <vector>

#include "dpe/cli.hpp"

int main(int argc, char** argv) {
  return dpe::run_cli(std::vector<std::string>(argv, argv + argc));
}
