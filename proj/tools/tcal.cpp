#include <string>
#include <vector>

#include "tcal/cli.hpp"

int main(int argc, char** argv) {
    return tcal::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
