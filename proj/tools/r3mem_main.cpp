#include "r3mem/cli.hpp"

int main(int argc, char ** argv) {
    return r3mem::cli_main(argc, argv);
}
