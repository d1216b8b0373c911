# cli包初始化文件
