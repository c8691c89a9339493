fn main() {
    timesqueeze::commands::main_entry();
}
