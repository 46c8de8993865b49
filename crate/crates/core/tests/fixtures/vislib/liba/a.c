int a_api(int x) { return x + 1; }
