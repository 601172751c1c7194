#include <string>
#include <vector>

#include "maskveil/cli.hpp"

int main(int argc, char** argv) {
  return maskveil::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
