#include "kvprune/cli.hpp"
#include "kvprune/numerics.hpp"

#include <iostream>

int main(int argc, char ** argv) {
    kvprune::configure_process_allocator();
    std::vector<std::string> args(argv + 1, argv + argc);
    return kvprune::run_cli(args, std::cout, std::cerr);
}
