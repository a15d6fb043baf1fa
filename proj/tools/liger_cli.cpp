#include "liger/tensor.hpp"

#include <cstdio>

int main() {
    std::puts("liger_cli: subcommands not wired up yet");
    return 1;
}
