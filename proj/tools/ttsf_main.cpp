#include <vector>

#include "ttsf/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return ttsf::cli::run_command(args);
}
