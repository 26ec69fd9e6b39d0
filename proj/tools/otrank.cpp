#include <string>
#include <vector>

#include "otrank/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return otrank::cli::run(args);
}
