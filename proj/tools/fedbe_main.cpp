#include <string>
#include <vector>

#include "fedbe/harness.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return fedbe::harness::cli(args);
}
