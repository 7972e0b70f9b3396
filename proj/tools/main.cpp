#include <iostream>

#include "rfcnet/cli.hpp"

int main(int argc, char** argv) {
    return rfcnet::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
